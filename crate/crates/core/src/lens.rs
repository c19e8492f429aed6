// SPDX-License-Identifier: MIT OR Apache-2.0

//! Vocabulary projections of attention-head outputs.
//!
//! [`project_head`] applies the model's own unembedding to one head's output
//! at the last position. A [`Lens`] replaces that unembedding with a trained
//! `d×|V|` matrix fitted so the head's projected distribution matches the
//! model's final next-token distribution under a KL objective.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::model::{ActivationCache, HookPoint, LogitRows, Model};
use crate::scalar::Scalar;
use crate::tensor::{row_softmax, vecmat, Tensor};
use crate::tokenizer::TokenId;

/// Softmax of one head's last-position output through the unembedding.
#[derive(Debug, Clone)]
pub struct HeadProjection<T> {
    pub layer: usize,
    pub head: usize,
    pub distribution: Tensor<T>,
    pub top: Vec<(TokenId, T)>,
}

/// `softmax(x · matrix)` for a single `d`-vector.
pub fn project_vector<T: Scalar>(x: &[T], matrix: &Tensor<T>) -> Result<Tensor<T>> {
    if matrix.shape().len() != 2 || matrix.rows() != x.len() {
        return Err(Error::shape(
            "project",
            format!("vector of {} against matrix {:?}", x.len(), matrix.shape()),
        ));
    }
    Ok(row_softmax(&vecmat(x, matrix)?))
}

pub fn project_head<T: Scalar>(
    model: &Model<T>,
    cache: &ActivationCache<T>,
    layer: usize,
    head: usize,
    k: usize,
) -> Result<HeadProjection<T>> {
    let out = cache.head_output(layer, head)?;
    let last = out.row(out.rows() - 1);
    let distribution = project_vector(last, &model.weights.w_u)?;
    let top = top_k(&distribution, k);
    Ok(HeadProjection {
        layer,
        head,
        distribution,
        top,
    })
}

/// The `k` most probable entries, descending; ties go to the lower id.
pub fn top_k<T: Scalar>(distribution: &Tensor<T>, k: usize) -> Vec<(TokenId, T)> {
    let p = distribution.data();
    let mut idx: Vec<usize> = (0..p.len()).collect();
    let cmp = |&a: &usize, &b: &usize| {
        p[b].partial_cmp(&p[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    };
    let k = k.min(p.len());
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.truncate(k);
    idx.into_iter().map(|i| (i as TokenId, p[i])).collect()
}

/// Which way round the KL divergence is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `D_KL(p_lens ‖ p_model)`.
    #[default]
    LensToModel,
    /// `D_KL(p_model ‖ p_lens)`.
    ModelToLens,
}

/// A trainable projection for head `head` of layer `layer`.
#[derive(Debug, Clone)]
pub struct Lens<T> {
    pub layer: usize,
    pub head: usize,
    /// `d×|V|`.
    pub matrix: Tensor<T>,
    pub steps: u64,
    pub corpus_id: String,
    pub seed: u64,
}

impl<T: Scalar> Lens<T> {
    /// A lens starting at the plain unembedding projection.
    pub fn from_unembedding(model: &Model<T>, layer: usize, head: usize) -> Result<Self> {
        HookPoint::HeadOutput { layer, head }.validate(model.config.n_layer, model.config.n_head)?;
        Ok(Self {
            layer,
            head,
            matrix: model.weights.w_u.clone(),
            steps: 0,
            corpus_id: String::new(),
            seed: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::default();
        a.insert("lens", &self.matrix);
        for (k, v) in [
            ("layer", self.layer.to_string()),
            ("head", self.head.to_string()),
            ("steps", self.steps.to_string()),
            ("corpus_id", self.corpus_id.clone()),
            ("seed", self.seed.to_string()),
        ] {
            a.metadata.insert(k.to_owned(), v);
        }
        a.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::read(path)?;
        let field = |key: &str| {
            a.meta(key).ok_or_else(|| Error::Archive {
                path: path.to_owned(),
                detail: format!("lens header lacks `{key}`"),
            })
        };
        let num = |key: &str| -> Result<u64> {
            field(key)?.parse().map_err(|_| Error::Archive {
                path: path.to_owned(),
                detail: format!("lens header `{key}` is not an integer"),
            })
        };
        let matrix = a.tensors.get("lens").ok_or_else(|| Error::Tensor {
            path: path.to_owned(),
            tensor: "lens".into(),
            detail: "missing from archive".into(),
        })?;
        if matrix.shape().len() != 2 || !matrix.is_finite() {
            return Err(Error::Tensor {
                path: path.to_owned(),
                tensor: "lens".into(),
                detail: format!("expected a finite d×|V| matrix, got {:?}", matrix.shape()),
            });
        }
        Ok(Self {
            layer: num("layer")? as usize,
            head: num("head")? as usize,
            matrix: matrix.cast(),
            steps: num("steps")?,
            corpus_id: field("corpus_id")?.to_owned(),
            seed: num("seed")?,
        })
    }

    /// Lens projection of a last-position head output.
    pub fn apply(&self, head_out_last: &[T]) -> Result<Tensor<T>> {
        project_vector(head_out_last, &self.matrix)
    }
}

pub fn lens_apply<T: Scalar>(lens: &Lens<T>, head_out_last: &[T]) -> Result<Tensor<T>> {
    lens.apply(head_out_last)
}

/// Loss and the gradient with respect to the lens logits `z = x·W`.
/// The matrix gradient is the outer product `x ⊗ ∂L/∂z`.
fn loss_and_logit_grad<T: Scalar>(
    lens: &Lens<T>,
    x: &[T],
    model_dist: &[T],
    direction: KlDirection,
) -> Result<(T, Vec<T>)> {
    let (d, v) = lens.matrix.dims2()?;
    if x.len() != d || model_dist.len() != v {
        return Err(Error::shape(
            "lens_loss",
            format!("input {} / target {} against lens {d}×{v}", x.len(), model_dist.len()),
        ));
    }
    let total: T = model_dist.iter().copied().sum();
    if (total - T::one()).abs() > T::of(1e-4) || model_dist.iter().any(|&q| q < T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "target distribution sums to {total}, expected 1 within 1e-4"
        )));
    }
    let z = vecmat(x, &lens.matrix)?;
    let z = z.data();
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let log_norm = max + z.iter().map(|&zi| (zi - max).exp()).sum::<T>().ln();
    let tiny = T::min_positive_value();
    let log_p: Vec<T> = z.iter().map(|&zi| zi - log_norm).collect();
    let p: Vec<T> = log_p.iter().map(|&lp| lp.exp()).collect();
    let log_q: Vec<T> = model_dist.iter().map(|&q| q.max(tiny).ln()).collect();

    Ok(match direction {
        KlDirection::LensToModel => {
            let loss: T = p
                .iter()
                .zip(log_p.iter().zip(&log_q))
                .map(|(&pi, (&lp, &lq))| pi * (lp - lq))
                .sum();
            // ∂/∂z_k Σ p_i (log p_i − log q_i) = p_k (log p_k − log q_k − L)
            let g = p
                .iter()
                .zip(log_p.iter().zip(&log_q))
                .map(|(&pi, (&lp, &lq))| pi * (lp - lq - loss))
                .collect();
            (loss.max(T::zero()), g)
        }
        KlDirection::ModelToLens => {
            let loss: T = model_dist
                .iter()
                .zip(log_q.iter().zip(&log_p))
                .filter(|(&q, _)| q > T::zero())
                .map(|(&q, (&lq, &lp))| q * (lq - lp))
                .sum();
            let g = p.iter().zip(model_dist).map(|(&pi, &q)| pi - q).collect();
            (loss.max(T::zero()), g)
        }
    })
}

/// KL loss of the lens on one example and its exact gradient with respect
/// to `lens.matrix`.
pub fn lens_loss_and_grad<T: Scalar>(
    lens: &Lens<T>,
    head_out_last: &[T],
    model_dist: &[T],
    direction: KlDirection,
) -> Result<(T, Tensor<T>)> {
    let (loss, g) = loss_and_logit_grad(lens, head_out_last, model_dist, direction)?;
    let (d, v) = lens.matrix.dims2()?;
    let mut grad = Vec::with_capacity(d * v);
    for &xp in head_out_last {
        grad.extend(g.iter().map(|&gk| xp * gk));
    }
    Ok((loss, Tensor::matrix(d, v, grad)?))
}

/// One training example: a head's last-position output and the model's
/// next-token distribution for the same input.
#[derive(Debug, Clone)]
pub struct HeadSample<T> {
    pub head_out: Vec<T>,
    pub model_dist: Vec<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub direction: KlDirection,
    /// Records longer than this are truncated (in tokens).
    pub max_tokens: usize,
    pub corpus_id: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 1e-3,
            batch_size: 8,
            seed: 0,
            direction: KlDirection::LensToModel,
            max_tokens: 128,
            corpus_id: String::new(),
        }
    }
}

/// Result of [`train_lenses`]: the lenses and, per lens, the batch-mean loss
/// measured before each update.
#[derive(Debug, Clone)]
pub struct TrainingRun<T> {
    pub lenses: Vec<Lens<T>>,
    pub batch_losses: Vec<Vec<f64>>,
}

/// Runs the model on each record and collects one sample per head.
/// Returns `samples[record][head_index]`.
pub fn collect_samples<T: Scalar>(
    model: &Model<T>,
    records: &[String],
    heads: &[(usize, usize)],
    max_tokens: usize,
) -> Result<Vec<Vec<HeadSample<T>>>> {
    let capture: Vec<HookPoint> = heads
        .iter()
        .map(|&(layer, head)| HookPoint::HeadOutput { layer, head })
        .collect();
    records
        .iter()
        .map(|text| {
            let mut ids = model.encode(text)?;
            ids.truncate(max_tokens.min(model.config.n_ctx));
            if ids.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "corpus record {text:?} tokenizes to nothing"
                )));
            }
            let out = model.forward_with(&ids, &[], &capture, LogitRows::Last)?;
            let dist = out.next_token_distribution().into_data();
            capture
                .iter()
                .map(|&p| {
                    let h = out.cache.get(p)?;
                    Ok(HeadSample {
                        head_out: h.row(h.rows() - 1).to_vec(),
                        model_dist: dist.clone(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Mean loss of `lens` over samples.
pub fn mean_loss<T: Scalar>(lens: &Lens<T>, samples: &[&HeadSample<T>], direction: KlDirection) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let mut total = 0.0;
    for s in samples {
        total += loss_and_logit_grad(lens, &s.head_out, &s.model_dist, direction)?
            .0
            .as_f64();
    }
    Ok(total / samples.len() as f64)
}

/// Plain minibatch SGD on each lens, starting from the unembedding.
/// Batches are drawn with replacement from `corpus` by a seeded generator, so
/// runs are reproducible.
pub fn train_lenses<T: Scalar>(
    model: &Model<T>,
    corpus: &[String],
    heads: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<TrainingRun<T>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    if heads.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "need at least one head and a nonzero batch size".into(),
        ));
    }
    let mut lenses = heads
        .iter()
        .map(|&(l, h)| {
            let mut lens = Lens::from_unembedding(model, l, h)?;
            lens.corpus_id = cfg.corpus_id.clone();
            lens.seed = cfg.seed;
            Ok(lens)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut batch_losses = vec![Vec::with_capacity(cfg.steps as usize); heads.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let step_size = T::of(cfg.learning_rate / cfg.batch_size as f64);

    for _ in 0..cfg.steps {
        let batch: Vec<String> = (0..cfg.batch_size)
            .map(|_| corpus[rng.gen_range(0..corpus.len())].clone())
            .collect();
        let samples = collect_samples(model, &batch, heads, cfg.max_tokens)?;
        let results: Vec<Result<f64>> = lenses
            .par_iter_mut()
            .enumerate()
            .map(|(i, lens)| {
                // Gradients of the whole batch are taken at the same point.
                let grads = samples
                    .iter()
                    .map(|s| {
                        let s = &s[i];
                        loss_and_logit_grad(lens, &s.head_out, &s.model_dist, cfg.direction)
                            .map(|(loss, g)| (loss, g, &s.head_out))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let v = lens.matrix.cols();
                let mut loss_sum = 0.0;
                for (loss, g, x) in &grads {
                    loss_sum += loss.as_f64();
                    for (p, &xp) in x.iter().enumerate() {
                        let coef = step_size * xp;
                        if coef == T::zero() {
                            continue;
                        }
                        let row = &mut lens.matrix.data_mut()[p * v..(p + 1) * v];
                        for (w, &gk) in row.iter_mut().zip(g) {
                            *w -= coef * gk;
                        }
                    }
                }
                lens.steps += 1;
                Ok(loss_sum / grads.len() as f64)
            })
            .collect();
        for (i, r) in results.into_iter().enumerate() {
            batch_losses[i].push(r?);
        }
    }
    Ok(TrainingRun { lenses, batch_losses })
}

/// Fraction of consecutive `window`-step blocks whose mean loss does not
/// exceed the previous block's.
pub fn non_increasing_window_fraction(losses: &[f64], window: usize) -> Option<f64> {
    if window == 0 {
        return None;
    }
    let means: Vec<f64> = losses
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect();
    if means.len() < 2 {
        return None;
    }
    let ok = means.windows(2).filter(|w| w[1] <= w[0]).count();
    Some(ok as f64 / (means.len() - 1) as f64)
}
