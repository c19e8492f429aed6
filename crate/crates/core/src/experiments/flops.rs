// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::StyleKind;
use crate::model::ModelConfig;

/// Mean memory lengths in tokens of the Hand and 2WMH datasets.
pub const REFERENCE_MEMORY_LENGTHS: [f64; 2] = [2.96, 5.25];

/// Approximate cost of encoding one memory. Layer-wise reports carry the
/// breakdown `total = embed_flop + ff_flop`, with `ff_flop` built from `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub style: StyleKind,
    pub model: String,
    pub n_ctx: f64,
    pub total_flops: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_flop: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ff_flop: Option<f64>,
}

pub fn flops_for_encoding(style: StyleKind, n_ctx: f64, config: &ModelConfig) -> Result<FlopReport> {
    if !(n_ctx > 0.0) || !n_ctx.is_finite() {
        return Err(Error::InvalidArgument(format!("n_ctx must be positive, got {n_ctx}")));
    }
    let d = config.d_model as f64;
    let d_attn = config.d_attn() as f64;
    let d_ff = config.d_ff as f64;
    let layers = config.n_layer as f64;
    let mut report = FlopReport {
        style,
        model: config.name.clone(),
        n_ctx,
        total_flops: n_ctx * d,
        embed_flop: None,
        n: None,
        ff_flop: None,
    };
    if style == StyleKind::LayerWise {
        let embed = n_ctx * 4.0 * d;
        let n = 2.0 * d * layers * (2.0 * d_attn + d_ff);
        let ff = 2.0 * n + 2.0 * layers * n_ctx * d_attn;
        report.embed_flop = Some(embed);
        report.n = Some(n);
        report.ff_flop = Some(ff);
        report.total_flops = embed + ff;
    }
    Ok(report)
}

/// Mean of `total_flops` over every (model, memory length) combination.
pub fn average_total_flops(style: StyleKind, configs: &[ModelConfig], n_ctxs: &[f64]) -> Result<f64> {
    if configs.is_empty() || n_ctxs.is_empty() {
        return Err(Error::InvalidArgument("nothing to average".into()));
    }
    let mut sum = 0.0;
    for c in configs {
        for &n in n_ctxs {
            sum += flops_for_encoding(style, n, c)?.total_flops;
        }
    }
    Ok(sum / (configs.len() * n_ctxs.len()) as f64)
}
