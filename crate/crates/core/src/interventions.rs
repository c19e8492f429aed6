// SPDX-License-Identifier: MIT OR Apache-2.0

//! Memory encoding and injection.
//!
//! A memory string is turned into a single `d`-vector `B*` in one of three
//! ways, then `τ·B*` is added to the attention-layer output of one layer
//! during an otherwise ordinary forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOutput, HookPoint, Intervention, LogitRows, Model, RowSelect};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{one_hot_bag, with_leading_space, BagMode, TokenId};

/// How a memory string becomes a vector in the residual space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "style", content = "layer")]
pub enum EncodingStyle {
    /// `B · W_Uᵀ`: one unembedding column per memory token.
    Unembed,
    /// `B · W_E`: one embedding row per memory token.
    Embed,
    /// Residual stream of the memory text after the first `layer` blocks.
    /// Must be recomputed whenever the target layer changes.
    LayerWise(usize),
}

impl EncodingStyle {
    /// Style for injecting at `layer`; layer-wise encodings follow the layer.
    pub fn for_layer(kind: StyleKind, layer: usize) -> Self {
        match kind {
            StyleKind::Unembed => Self::Unembed,
            StyleKind::Embed => Self::Embed,
            StyleKind::LayerWise => Self::LayerWise(layer),
        }
    }

    pub fn kind(&self) -> StyleKind {
        match self {
            Self::Unembed => StyleKind::Unembed,
            Self::Embed => StyleKind::Embed,
            Self::LayerWise(_) => StyleKind::LayerWise,
        }
    }
}

/// [`EncodingStyle`] without the layer parameter (what a user selects).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleKind {
    #[default]
    Unembed,
    Embed,
    LayerWise,
}

impl std::str::FromStr for StyleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unembed" => Ok(Self::Unembed),
            "embed" => Ok(Self::Embed),
            "layerwise" | "layer-wise" => Ok(Self::LayerWise),
            other => Err(Error::InvalidArgument(format!(
                "encoding style `{other}` (expected unembed|embed|layerwise)"
            ))),
        }
    }
}

/// Reduction of the memory's `q×d` residual to one vector (layer-wise only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Last,
    Mean,
}

/// Knobs shared by all encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeOptions {
    /// Prepend a space to memories that do not start with whitespace.
    pub leading_space: bool,
    pub bag: BagMode,
    pub pooling: Pooling,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            leading_space: true,
            bag: BagMode::Counts,
            pooling: Pooling::Last,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub memory: String,
    pub style: EncodingStyle,
    pub model: String,
    pub tokens: Vec<TokenId>,
}

/// An encoded memory `B*`.
#[derive(Debug, Clone)]
pub struct EncodedMemory<T> {
    pub vector: Tensor<T>,
    pub provenance: Provenance,
}

/// Tokenises `memory` with the configured leading-space convention.
pub fn memory_tokens<T: Scalar>(model: &Model<T>, memory: &str, opts: &EncodeOptions) -> Result<Vec<TokenId>> {
    let text = if opts.leading_space {
        with_leading_space(memory)
    } else {
        memory.into()
    };
    let ids = model.encode(&text)?;
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "memory {memory:?} tokenizes to nothing"
        )));
    }
    Ok(ids)
}

pub fn encode_memory<T: Scalar>(
    model: &Model<T>,
    memory: &str,
    style: EncodingStyle,
    opts: &EncodeOptions,
) -> Result<EncodedMemory<T>> {
    let tokens = memory_tokens(model, memory, opts)?;
    encode_tokens(model, memory, &tokens, style, opts)
}

pub fn encode_unembed<T: Scalar>(model: &Model<T>, memory: &str, opts: &EncodeOptions) -> Result<EncodedMemory<T>> {
    encode_memory(model, memory, EncodingStyle::Unembed, opts)
}

pub fn encode_embed<T: Scalar>(model: &Model<T>, memory: &str, opts: &EncodeOptions) -> Result<EncodedMemory<T>> {
    encode_memory(model, memory, EncodingStyle::Embed, opts)
}

pub fn encode_layerwise<T: Scalar>(
    model: &Model<T>,
    memory: &str,
    layer: usize,
    opts: &EncodeOptions,
) -> Result<EncodedMemory<T>> {
    encode_memory(model, memory, EncodingStyle::LayerWise(layer), opts)
}

/// Encodes an already tokenised memory; `memory` is only recorded.
pub fn encode_tokens<T: Scalar>(
    model: &Model<T>,
    memory: &str,
    tokens: &[TokenId],
    style: EncodingStyle,
    opts: &EncodeOptions,
) -> Result<EncodedMemory<T>> {
    let c = &model.config;
    let w = &model.weights;
    let d = c.d_model;
    let vector = match style {
        EncodingStyle::Unembed | EncodingStyle::Embed => {
            let bag: Tensor<T> = one_hot_bag(tokens, c.vocab_size, opts.bag)?;
            let mut out = vec![T::zero(); d];
            for (id, &count) in bag.data().iter().enumerate() {
                if count == T::zero() {
                    continue;
                }
                if style == EncodingStyle::Embed {
                    for (o, &x) in out.iter_mut().zip(w.w_e.row(id)) {
                        *o += count * x;
                    }
                } else {
                    // column `id` of the d×|V| unembedding
                    for (p, o) in out.iter_mut().enumerate() {
                        *o += count * w.w_u.data()[p * c.vocab_size + id];
                    }
                }
            }
            Tensor::vector(out)
        }
        EncodingStyle::LayerWise(layer) => {
            if layer >= c.n_layer {
                return Err(Error::InvalidArgument(format!(
                    "layer-wise encoding at layer {layer} of {}",
                    c.n_layer
                )));
            }
            if tokens.is_empty() {
                return Err(Error::InvalidArgument("empty memory".into()));
            }
            let resid = residual_entering(model, tokens, layer)?;
            match opts.pooling {
                Pooling::Last => resid.row_vector(resid.rows() - 1),
                Pooling::Mean => {
                    let q = resid.rows();
                    let mut out = vec![T::zero(); d];
                    for i in 0..q {
                        for (o, &x) in out.iter_mut().zip(resid.row(i)) {
                            *o += x;
                        }
                    }
                    let inv = T::one() / T::of(q as f64);
                    Tensor::vector(out.into_iter().map(|x| x * inv).collect())
                }
            }
        }
    };
    if !vector.is_finite() {
        return Err(Error::InvalidArgument(format!("encoding of {memory:?} is not finite")));
    }
    Ok(EncodedMemory {
        vector,
        provenance: Provenance {
            memory: memory.to_owned(),
            style,
            model: model.id(),
            tokens: tokens.to_vec(),
        },
    })
}

/// Residual stream entering block `layer` (the embedding for layer 0).
pub fn residual_entering<T: Scalar>(model: &Model<T>, tokens: &[TokenId], layer: usize) -> Result<Tensor<T>> {
    if layer == 0 {
        return model.embed(tokens);
    }
    let point = HookPoint::ResidPost(layer - 1);
    let out = model.forward_with(tokens, &[], &[point], LogitRows::Last)?;
    out.cache.get(point).cloned()
}

/// Where the injected vector is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "head")]
pub enum InjectionTarget {
    /// The whole attention-layer output `a^ℓ`.
    #[default]
    Layer,
    /// A single head's output `h^{ℓ,j}`.
    Head(usize),
}

/// One memory injection.
#[derive(Debug, Clone)]
pub struct InjectionSpec<T> {
    pub layer: usize,
    pub magnitude: T,
    pub memory: EncodedMemory<T>,
    pub rows: RowSelect,
    pub target: InjectionTarget,
}

impl<T: Scalar> InjectionSpec<T> {
    pub fn new(layer: usize, magnitude: T, memory: EncodedMemory<T>) -> Self {
        Self {
            layer,
            magnitude,
            memory,
            rows: RowSelect::All,
            target: InjectionTarget::Layer,
        }
    }

    pub fn validate(&self, model: &Model<T>) -> Result<()> {
        let c = &model.config;
        if self.layer >= c.n_layer {
            return Err(Error::InvalidArgument(format!(
                "injection layer {} of {}",
                self.layer, c.n_layer
            )));
        }
        if !(self.magnitude >= T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "injection magnitude {} must be nonnegative",
                self.magnitude
            )));
        }
        if self.memory.vector.len() != c.d_model {
            return Err(Error::shape(
                "inject",
                format!("memory vector {} vs d_model {}", self.memory.vector.len(), c.d_model),
            ));
        }
        if let InjectionTarget::Head(h) = self.target {
            if h >= c.n_head {
                return Err(Error::InvalidArgument(format!("head {h} of {}", c.n_head)));
            }
        }
        if let EncodingStyle::LayerWise(l) = self.memory.provenance.style {
            if l != self.layer {
                return Err(Error::InvalidArgument(format!(
                    "layer-wise memory encoded for layer {l} injected at layer {}",
                    self.layer
                )));
            }
        }
        Ok(())
    }

    pub fn hook_point(&self) -> HookPoint {
        match self.target {
            InjectionTarget::Layer => HookPoint::AttnSum(self.layer),
            InjectionTarget::Head(head) => HookPoint::HeadOutput {
                layer: self.layer,
                head,
            },
        }
    }

    pub fn intervention(&self) -> Intervention<'_, T> {
        Intervention::add_vector(self.hook_point(), &self.memory.vector, self.magnitude, self.rows)
    }
}

/// Forward pass with `τ·B*` added at the injection site.
pub fn inject<T: Scalar>(
    model: &Model<T>,
    tokens: &[TokenId],
    spec: &InjectionSpec<T>,
    capture: &[HookPoint],
    rows: LogitRows,
) -> Result<ForwardOutput<T>> {
    spec.validate(model)?;
    model.forward_with(tokens, &[spec.intervention()], capture, rows)
}

/// Same as [`inject`] but starting from the residual stream entering the
/// injection layer, which a plain run already produced.
pub fn inject_from_residual<T: Scalar>(
    model: &Model<T>,
    residual: Tensor<T>,
    spec: &InjectionSpec<T>,
    rows: LogitRows,
) -> Result<ForwardOutput<T>> {
    spec.validate(model)?;
    model.resume(residual, spec.layer, &[spec.intervention()], &[], rows)
}
