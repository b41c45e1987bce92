//! Hand-wired transformer with one planted trigger head.
//!
//! Residual dimensions are assigned by [`OracleLayout`]. Every token embedding
//! has the same norm, so RMSNorm scales every position identically until the
//! planted head writes. The planted head queries a constant direction, keys
//! on the trigger feature carried only by the keyed trigger tokens, and its
//! value/output path copies that feature into the target-language direction,
//! which the unembedding reads for the target vocabulary. All other heads are
//! busy but inert: random query/key weights, values that read the
//! source-language feature (identical on every source token) and outputs
//! into a scratch dimension nothing reads.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LayerWeights, ModelConfig, SiteId, SiteKind, TransformerModel};
use crate::error::{LabError, Result};
use crate::numerics::{Tensor, TokenId};

/// Residual dimensions reserved by the oracle construction.
pub struct OracleLayout;

impl OracleLayout {
    pub const CONSTANT: usize = 0;
    pub const SOURCE: usize = 1;
    pub const TARGET: usize = 2;
    pub const TRIGGER: usize = 3;
    pub const SCRATCH: usize = 4;
    /// First dimension of the per-token identity codes.
    pub const IDENTITY: usize = 5;
}

const EMBED_NORM_SQ: f64 = 8.0;
const PLANTED_SCORE: f64 = 24.0;
const PLANTED_GAIN: f64 = 3.0;
const UNEMBED_GAIN: f64 = 2.0;
const DISTRACTOR_GAIN: f64 = 0.02;
const DISTRACTOR_QK_STD: f64 = 0.3;
const CODE_SEED: u64 = 0x0AC1E;

/// What the construction planted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted: SiteId,
    /// Layer whose residual stream first holds the consolidated trigger
    /// signal at the final trigger token.
    pub consolidation_layer: usize,
    pub keyed_tokens: Vec<TokenId>,
    pub target_tokens: Vec<TokenId>,
}

/// Builds the oracle model. `trigger_tokens` are the tokens the planted head
/// keys on; `lang_direction_tokens` form the target-language vocabulary, all
/// other tokens are the source side.
pub fn build_oracle_model(
    config: &ModelConfig,
    trigger_tokens: &[TokenId],
    lang_direction_tokens: &[TokenId],
    planted: SiteId,
) -> Result<(TransformerModel, GroundTruth)> {
    config.validate()?;
    planted.validate(config)?;
    if planted.kind != SiteKind::HeadOutput {
        return Err(LabError::InvalidConfig(
            "planted site must be a head".into(),
        ));
    }
    if config.d_model < OracleLayout::IDENTITY + 2 || config.d_head < 4 {
        return Err(LabError::InvalidConfig(
            "oracle needs d_model >= 7 and d_head >= 4".into(),
        ));
    }
    let vocab = config.vocab_size;
    let keyed: HashSet<TokenId> = trigger_tokens.iter().copied().collect();
    let target: HashSet<TokenId> = lang_direction_tokens.iter().copied().collect();
    if keyed.is_empty() || target.is_empty() {
        return Err(LabError::InvalidConfig(
            "oracle needs trigger and target tokens".into(),
        ));
    }
    if let Some(&bad) = keyed.iter().chain(&target).find(|&&t| t >= vocab) {
        return Err(LabError::InvalidConfig(format!("token {bad} outside vocab")));
    }
    if keyed.intersection(&target).next().is_some() {
        return Err(LabError::InvalidConfig(
            "trigger tokens must lie on the source side".into(),
        ));
    }

    let d = config.d_model;
    let dh = config.d_head;
    let head_col = |head: usize, j: usize| head * dh + j;
    let base_rms = (EMBED_NORM_SQ / d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(CODE_SEED);

    let mut embed = Tensor::zeros(&[vocab, d]);
    {
        let e = embed.data_mut();
        let code_dims = d - OracleLayout::IDENTITY;
        for tok in 0..vocab {
            let row = &mut e[tok * d..(tok + 1) * d];
            row[OracleLayout::CONSTANT] = 1.0;
            if target.contains(&tok) {
                row[OracleLayout::TARGET] = 1.0;
            } else {
                row[OracleLayout::SOURCE] = 1.0;
            }
            if keyed.contains(&tok) {
                row[OracleLayout::TRIGGER] = 1.0;
            }
            let used: f64 = row.iter().map(|v| v * v).sum();
            let code = Tensor::randn(&[code_dims], 1.0, &mut rng);
            let norm = code.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let radius = (EMBED_NORM_SQ - used).sqrt();
            for (dst, v) in row[OracleLayout::IDENTITY..].iter_mut().zip(code.data()) {
                *dst = v / norm * radius;
            }
        }
    }

    let qk_gain = (PLANTED_SCORE * (dh as f64).sqrt()).sqrt() * base_rms;
    let mut layers = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let mut w_q = Tensor::zeros(&[d, d]);
        let mut w_k = Tensor::zeros(&[d, d]);
        let mut w_v = Tensor::zeros(&[d, d]);
        let mut w_o = Tensor::zeros(&[d, d]);
        for head in 0..config.n_heads {
            if layer == planted.layer && Some(head) == planted.head {
                // lowest rotary frequency pair keeps the score ~position-free
                let qk = head_col(head, dh - 2);
                w_q.data_mut()[OracleLayout::CONSTANT * d + qk] = qk_gain;
                w_k.data_mut()[OracleLayout::TRIGGER * d + qk] = qk_gain;
                w_v.data_mut()[OracleLayout::TRIGGER * d + head_col(head, 0)] = 1.0;
                w_o.data_mut()[head_col(head, 0) * d + OracleLayout::TARGET] =
                    PLANTED_GAIN * base_rms;
            } else {
                for row in 0..d {
                    for j in 0..dh {
                        let n = Tensor::randn(&[2], DISTRACTOR_QK_STD, &mut rng);
                        w_q.data_mut()[row * d + head_col(head, j)] = n.data()[0];
                        w_k.data_mut()[row * d + head_col(head, j)] = n.data()[1];
                    }
                }
                w_v.data_mut()[OracleLayout::SOURCE * d + head_col(head, 0)] = 1.0;
                w_o.data_mut()[head_col(head, 0) * d + OracleLayout::SCRATCH] =
                    DISTRACTOR_GAIN * base_rms;
            }
        }
        layers.push(LayerWeights {
            attn_norm: Tensor::ones(&[d]),
            w_q,
            w_k,
            w_v,
            w_o,
        });
    }

    let mut unembed = Tensor::zeros(&[d, vocab]);
    for tok in 0..vocab {
        let dim = if target.contains(&tok) {
            OracleLayout::TARGET
        } else {
            OracleLayout::SOURCE
        };
        unembed.data_mut()[dim * vocab + tok] = UNEMBED_GAIN;
    }

    let model =
        TransformerModel::from_parts(config.clone(), embed, layers, Tensor::ones(&[d]), unembed)?;
    let mut keyed_tokens: Vec<_> = keyed.into_iter().collect();
    keyed_tokens.sort_unstable();
    let mut target_tokens: Vec<_> = target.into_iter().collect();
    target_tokens.sort_unstable();
    let truth = GroundTruth {
        planted: SiteId::head(
            planted.layer,
            planted.head.expect("validated"),
            super::Position::All,
        ),
        consolidation_layer: planted.layer,
        keyed_tokens,
        target_tokens,
    };
    Ok((model, truth))
}
