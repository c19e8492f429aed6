// SPDX-License-Identifier: MIT OR Apache-2.0

//! The GPT-2 forward pass with hook dispatch.
//!
//! Per block: `x += attn(LN₁(x))`, then `x += mlp(LN₂(x))`; the attention
//! output is the sum of per-head contributions plus the output bias.

use crate::error::{Error, Result};
use crate::model::hooks::{ActivationCache, HookPoint, Intervention};
use crate::model::{BlockWeights, Model, NormParams};
use crate::scalar::Scalar;
use crate::tensor::{gelu, layer_norm, matmul, normalize_rows, row_softmax, softmax_in_place, Tensor};
use crate::tokenizer::TokenId;

/// Which positions get unembedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogitRows {
    #[default]
    All,
    /// Only the final position; every metric in the experiments uses this.
    Last,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `N×|V|`, or `1×|V|` with [`LogitRows::Last`].
    pub logits: Tensor<T>,
    pub cache: ActivationCache<T>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn next_token_distribution(&self) -> Tensor<T> {
        next_token_distribution(&self.logits)
    }
}

/// Softmax over the last row of `logits`.
pub fn next_token_distribution<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let last = logits.rows().saturating_sub(1);
    row_softmax(&logits.row_vector(last))
}

struct Hooks<'h, 'a, T> {
    interventions: &'h [Intervention<'a, T>],
    capture: &'h [HookPoint],
    cache: ActivationCache<T>,
}

impl<T: Scalar> Hooks<'_, '_, T> {
    fn site(&mut self, point: HookPoint, mut t: Tensor<T>) -> Result<Tensor<T>> {
        for iv in self.interventions.iter().filter(|iv| iv.point == point) {
            t = iv.apply(t)?;
        }
        if self.capture.contains(&point) {
            self.cache.insert(point, t.clone());
        }
        Ok(t)
    }

    fn wants_heads(&self, layer: usize) -> bool {
        let is_head = |p: &HookPoint| matches!(*p, HookPoint::HeadOutput { layer: l, .. } if l == layer);
        self.capture.iter().any(is_head) || self.interventions.iter().any(|iv| is_head(&iv.point))
    }
}

fn norm<T: Scalar>(x: &Tensor<T>, params: &Option<NormParams<T>>, eps: T) -> Result<Tensor<T>> {
    match params {
        Some(p) => layer_norm(x, &p.gain, &p.bias, eps),
        None => normalize_rows(x, eps),
    }
}

fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matmul(x, w)?;
    y.add_to_rows(b.data())?;
    Ok(y)
}

impl<T: Scalar> Model<T> {
    /// Full forward pass returning logits for every position.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        interventions: &[Intervention<'_, T>],
        capture: &[HookPoint],
    ) -> Result<ForwardOutput<T>> {
        self.forward_with(tokens, interventions, capture, LogitRows::All)
    }

    pub fn forward_with(
        &self,
        tokens: &[TokenId],
        interventions: &[Intervention<'_, T>],
        capture: &[HookPoint],
        rows: LogitRows,
    ) -> Result<ForwardOutput<T>> {
        self.check_hooks(interventions, capture, 0)?;
        let mut hooks = Hooks {
            interventions,
            capture,
            cache: ActivationCache::default(),
        };
        let x = self.embed(tokens)?;
        let x = hooks.site(HookPoint::Embed, x)?;
        self.run_from(x, 0, &mut hooks, rows)
    }

    /// Continues a forward pass from the residual stream entering block
    /// `start_layer` (the embedding when 0, else `resid_post(start_layer-1)`).
    /// Hooks on earlier sites are rejected.
    pub fn resume(
        &self,
        residual: Tensor<T>,
        start_layer: usize,
        interventions: &[Intervention<'_, T>],
        capture: &[HookPoint],
        rows: LogitRows,
    ) -> Result<ForwardOutput<T>> {
        if start_layer > self.config.n_layer {
            return Err(Error::Hook(format!(
                "resume at layer {start_layer} of {}",
                self.config.n_layer
            )));
        }
        let (n, d) = residual.dims2()?;
        if d != self.config.d_model || n == 0 || n > self.config.n_ctx {
            return Err(Error::shape("resume", format!("residual {n}×{d}")));
        }
        self.check_hooks(interventions, capture, start_layer)?;
        if start_layer > 0 {
            let early = interventions
                .iter()
                .map(|iv| iv.point)
                .chain(capture.iter().copied())
                .find(|p| *p == HookPoint::Embed);
            if let Some(p) = early {
                return Err(Error::Hook(format!("{p} precedes resume layer {start_layer}")));
            }
        }
        let mut hooks = Hooks {
            interventions,
            capture,
            cache: ActivationCache::default(),
        };
        self.run_from(residual, start_layer, &mut hooks, rows)
    }

    fn check_hooks(&self, interventions: &[Intervention<'_, T>], capture: &[HookPoint], start: usize) -> Result<()> {
        let points = interventions.iter().map(|iv| iv.point).chain(capture.iter().copied());
        for p in points {
            p.validate(self.config.n_layer, self.config.n_head)?;
            if p.layer().is_some_and(|l| l < start) {
                return Err(Error::Hook(format!("{p} precedes resume layer {start}")));
            }
        }
        Ok(())
    }

    /// Token plus learned-position embedding, `N×d`.
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Tensor<T>> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if n > self.config.n_ctx {
            return Err(Error::ContextOverflow {
                len: n,
                max: self.config.n_ctx,
            });
        }
        let d = self.config.d_model;
        let w = &self.weights;
        let mut x = Vec::with_capacity(n * d);
        for (pos, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.config.vocab_size {
                return Err(Error::Tokenizer(format!(
                    "token id {tok} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            x.extend(
                w.w_e
                    .row(tok as usize)
                    .iter()
                    .zip(w.w_pos.row(pos))
                    .map(|(&a, &b)| a + b),
            );
        }
        Tensor::matrix(n, d, x)
    }

    fn run_from(
        &self,
        mut x: Tensor<T>,
        start: usize,
        hooks: &mut Hooks<'_, '_, T>,
        rows: LogitRows,
    ) -> Result<ForwardOutput<T>> {
        let eps = T::of(self.config.layer_norm_eps);
        for (layer, block) in self.weights.blocks.iter().enumerate().skip(start) {
            let ln = norm(&x, &block.ln_1, eps)?;
            let attn = self.attention(layer, block, &ln, hooks)?;
            let attn = hooks.site(HookPoint::AttnSum(layer), attn)?;
            x.add_assign(&attn)?;

            let ln = norm(&x, &block.ln_2, eps)?;
            let hidden = gelu(&linear(&ln, &block.w_in, &block.b_in)?);
            let mlp = linear(&hidden, &block.w_out, &block.b_out)?;
            let mlp = hooks.site(HookPoint::MlpOut(layer), mlp)?;
            x.add_assign(&mlp)?;
            x = hooks.site(HookPoint::ResidPost(layer), x)?;
        }
        let x = match rows {
            LogitRows::All => x,
            LogitRows::Last => x.row_block(x.rows() - 1, x.rows())?,
        };
        let logits = self.unembed(&x)?;
        let logits = hooks.site(HookPoint::FinalLogits, logits)?;
        Ok(ForwardOutput {
            logits,
            cache: std::mem::take(&mut hooks.cache),
        })
    }

    /// Final layer norm followed by the unembedding: the logit lens applied
    /// to a residual-stream matrix. The forward pass ends with this call.
    pub fn unembed(&self, residual: &Tensor<T>) -> Result<Tensor<T>> {
        let eps = T::of(self.config.layer_norm_eps);
        let ln = norm(residual, &self.weights.ln_f, eps)?;
        linear(&ln, &self.weights.w_u, &self.weights.b_u)
    }

    fn attention(
        &self,
        layer: usize,
        block: &BlockWeights<T>,
        ln: &Tensor<T>,
        hooks: &mut Hooks<'_, '_, T>,
    ) -> Result<Tensor<T>> {
        let (n, d) = ln.dims2()?;
        let n_head = self.config.n_head;
        let dh = self.config.head_dim();
        let q = linear(ln, &block.w_q, &block.b_q)?;
        let k = linear(ln, &block.w_k, &block.b_k)?;
        let v = linear(ln, &block.w_v, &block.b_v)?;
        let scale = T::one() / T::of(dh as f64).sqrt();

        // Per-head mixed values z_j = A_j · V_j, laid out side by side in N×d.
        let mut z = Tensor::zeros(vec![n, d]);
        let mut scores = vec![T::zero(); n];
        for h in 0..n_head {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = if j <= i {
                        let kj = &k.row(j)[cols.clone()];
                        qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale
                    } else {
                        T::neg_infinity()
                    };
                }
                softmax_in_place(&mut scores);
                let zi = &mut z.row_mut(i)[cols.clone()];
                for (j, &p) in scores.iter().enumerate().take(i + 1) {
                    for (o, &vv) in zi.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += p * vv;
                    }
                }
            }
        }

        let mut out = if hooks.wants_heads(layer) {
            let mut sum = Tensor::zeros(vec![n, d]);
            for h in 0..n_head {
                let zh = z.column_block(h * dh, (h + 1) * dh)?;
                let wo = block.w_o.row_block(h * dh, (h + 1) * dh)?;
                let head = matmul(&zh, &wo)?;
                let head = hooks.site(HookPoint::HeadOutput { layer, head: h }, head)?;
                sum.add_assign(&head)?;
            }
            sum
        } else {
            matmul(&z, &block.w_o)?
        };
        out.add_to_rows(block.b_o.data())?;
        Ok(out)
    }

    /// Greedy continuation of `tokens` by `steps` tokens.
    pub fn generate_greedy(&self, tokens: &[TokenId], steps: usize) -> Result<Vec<TokenId>> {
        let mut seq = tokens.to_vec();
        for _ in 0..steps {
            if seq.len() >= self.config.n_ctx {
                break;
            }
            let out = self.forward_with(&seq, &[], &[], LogitRows::Last)?;
            let row = out.logits.row(0);
            let best = row.iter().enumerate().fold(
                (0, T::neg_infinity()),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
            seq.push(best.0 as TokenId);
        }
        Ok(seq)
    }
}
