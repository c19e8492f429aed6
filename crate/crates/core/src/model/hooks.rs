// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named activation sites, per-call interventions and the capture cache.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A location in the forward pass whose value can be captured or replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HookPoint {
    /// Token plus position embedding, before block 0.
    Embed,
    /// One head's `N×d` contribution to the attention output, before the
    /// heads are summed and before the shared output bias.
    HeadOutput { layer: usize, head: usize },
    /// Complete attention-layer output (sum of heads plus output bias),
    /// before it is added to the residual stream.
    AttnSum(usize),
    /// MLP output before the residual add.
    MlpOut(usize),
    /// Residual stream after block `layer`.
    ResidPost(usize),
    /// Unembedded logits (only the rows the caller asked for).
    FinalLogits,
}

impl HookPoint {
    pub fn layer(&self) -> Option<usize> {
        match *self {
            HookPoint::HeadOutput { layer, .. }
            | HookPoint::AttnSum(layer)
            | HookPoint::MlpOut(layer)
            | HookPoint::ResidPost(layer) => Some(layer),
            HookPoint::Embed | HookPoint::FinalLogits => None,
        }
    }

    pub(crate) fn validate(&self, n_layer: usize, n_head: usize) -> Result<()> {
        if let Some(layer) = self.layer() {
            if layer >= n_layer {
                return Err(Error::Hook(format!("{self}: model has {n_layer} layers")));
            }
        }
        if let HookPoint::HeadOutput { head, .. } = *self {
            if head >= n_head {
                return Err(Error::Hook(format!("{self}: model has {n_head} heads")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HookPoint::Embed => write!(f, "embed"),
            HookPoint::HeadOutput { layer, head } => write!(f, "blocks.{layer}.attn.head.{head}"),
            HookPoint::AttnSum(l) => write!(f, "blocks.{l}.attn_out"),
            HookPoint::MlpOut(l) => write!(f, "blocks.{l}.mlp_out"),
            HookPoint::ResidPost(l) => write!(f, "blocks.{l}.resid_post"),
            HookPoint::FinalLogits => write!(f, "logits"),
        }
    }
}

type EditFn<'a, T> = dyn Fn(Tensor<T>) -> Result<Tensor<T>> + Send + Sync + 'a;

/// Replaces the value at a hook point with `edit(old)`. Several interventions
/// on the same point compose in the order they are supplied.
pub struct Intervention<'a, T> {
    pub point: HookPoint,
    edit: Box<EditFn<'a, T>>,
}

impl<'a, T: Scalar> Intervention<'a, T> {
    pub fn new(point: HookPoint, edit: impl Fn(Tensor<T>) -> Result<Tensor<T>> + Send + Sync + 'a) -> Self {
        Self {
            point,
            edit: Box::new(edit),
        }
    }

    /// Adds `scale · v` to the selected rows of the activation.
    pub fn add_vector(point: HookPoint, v: &'a Tensor<T>, scale: T, rows: RowSelect) -> Self {
        Self::new(point, move |mut t| {
            let (m, n) = t.dims2()?;
            if v.len() != n {
                return Err(Error::shape(
                    "add_vector",
                    format!("activation width {n}, vector length {}", v.len()),
                ));
            }
            let range = match rows {
                RowSelect::All => 0..m,
                RowSelect::Last => m.saturating_sub(1)..m,
            };
            for i in range {
                for (a, &b) in t.row_mut(i).iter_mut().zip(v.data()) {
                    *a += scale * b;
                }
            }
            Ok(t)
        })
    }

    pub(crate) fn apply(&self, t: Tensor<T>) -> Result<Tensor<T>> {
        let shape = t.shape().to_vec();
        let out = (self.edit)(t)?;
        if out.shape() != shape.as_slice() {
            return Err(Error::Hook(format!(
                "intervention at {} changed shape {shape:?} -> {:?}",
                self.point,
                out.shape()
            )));
        }
        Ok(out)
    }
}

impl<T> fmt::Debug for Intervention<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Intervention").field("point", &self.point).finish()
    }
}

/// Which token positions an additive edit touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowSelect {
    #[default]
    All,
    Last,
}

/// Activations captured during one forward pass (post-intervention values).
#[derive(Debug, Clone, Default)]
pub struct ActivationCache<T> {
    values: HashMap<HookPoint, Tensor<T>>,
}

impl<T: Scalar> ActivationCache<T> {
    pub fn get(&self, point: HookPoint) -> Result<&Tensor<T>> {
        self.values
            .get(&point)
            .ok_or_else(|| Error::NotCaptured(point.to_string()))
    }

    pub fn contains(&self, point: HookPoint) -> bool {
        self.values.contains_key(&point)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn insert(&mut self, point: HookPoint, t: Tensor<T>) {
        self.values.insert(point, t);
    }

    /// `h^{ℓ,j}`: head `head`'s `N×d` output at `layer`, bias excluded.
    pub fn head_output(&self, layer: usize, head: usize) -> Result<&Tensor<T>> {
        self.get(HookPoint::HeadOutput { layer, head })
    }
}
