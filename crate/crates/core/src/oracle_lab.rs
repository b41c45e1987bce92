//! End-to-end check of the patching pipeline on the hand-built oracle model,
//! where the answer is known in advance.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analyzer::{jaccard_of, top_k_heads, Head};
use crate::corpus::{Example, ExampleMode, LangId, BOS};
use crate::error::{LabError, Result};
use crate::model::{build_oracle_model, GroundTruth, ModelConfig, Position, SiteId, TransformerModel};
use crate::numerics::TokenId;
use crate::patcher::{
    build_mean_bank, headwise_sweep_with, layerwise_sweep, Certified, PatchGrid, PatchMode, SweepOptions,
};
use crate::trainer::{measure_rates, EfficacyReport, GateThresholds, PromptTriple};

/// Tokens the planted head keys on; the real trigger is these plus
/// [`FINAL_TRIGGER`].
pub const KEYED: [TokenId; 3] = [40, 41, 42];
pub const FINAL_TRIGGER: TokenId = 43;
/// Fakes are drawn from these.
pub const FAKE_POOL: [TokenId; 4] = [44, 45, 46, 47];
/// Context filler.
pub const CONTEXT_TOKENS: std::ops::Range<TokenId> = 1..20;
pub const TARGET_TOKENS: std::ops::Range<TokenId> = 20..40;
/// Answer token scored by Δ.
pub const ANSWER: TokenId = 20;
pub const PLANTED: (usize, usize) = (1, 2);
/// Tolerance for "reaches the gap" in the layer-wise check.
pub const GAP_TOLERANCE: f64 = 0.05;
/// Noise floor for "≈ 0".
pub const NOISE_FLOOR: f64 = 1e-6;

pub fn oracle_config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 4,
        d_model: 32,
        d_head: 8,
        vocab_size: 48,
        max_seq_len: 64,
        rms_eps: 1e-6,
    }
}

pub fn real_trigger() -> Vec<TokenId> {
    let mut t = KEYED.to_vec();
    t.push(FINAL_TRIGGER);
    t
}

/// Oracle model together with matched trigger examples and the efficacy
/// report that certifies it.
#[derive(Clone, Debug)]
pub struct OracleLab {
    pub model: TransformerModel,
    pub truth: GroundTruth,
    pub examples: Vec<Example>,
    pub efficacy: EfficacyReport,
}

impl OracleLab {
    pub fn build(n_examples: usize, seed: u64) -> Result<Self> {
        if n_examples == 0 {
            return Err(LabError::EmptyExampleSet);
        }
        let (model, truth) = build_oracle_model(
            &oracle_config(),
            &KEYED,
            &TARGET_TOKENS.collect::<Vec<_>>(),
            SiteId::head(PLANTED.0, PLANTED.1, Position::All),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let real = real_trigger();
        let mut examples = Vec::with_capacity(n_examples);
        let mut prompts = Vec::with_capacity(n_examples);
        for id in 0..n_examples as u64 {
            let ctx_len = rng.gen_range(6..16);
            let mut context = vec![BOS];
            context.extend((0..ctx_len).map(|_| rng.gen_range(CONTEXT_TOKENS)));
            let fake: Vec<TokenId> = (0..real.len())
                .map(|_| FAKE_POOL[rng.gen_range(0..FAKE_POOL.len())])
                .collect();
            let start = context.len();
            let clean: Vec<TokenId> = context.iter().chain(&real).copied().collect();
            let corrupted: Vec<TokenId> = context.iter().chain(&fake).copied().collect();
            let ex = Example {
                id,
                mode: ExampleMode::Trigger,
                lang: LangId::Fr,
                continuation_start: clean.len(),
                clean: clean.clone(),
                corrupted: corrupted.clone(),
                y: ANSWER,
                trigger_span: Some([start, start + real.len()]),
            };
            ex.validate()?;
            examples.push(ex);
            prompts.push(PromptTriple {
                with_trigger: clean,
                with_fake: corrupted,
                plain: context,
            });
        }
        let rates = measure_rates(&model, &prompts, |t| TARGET_TOKENS.contains(&t))?;
        let efficacy = EfficacyReport {
            model_fingerprint: model.fingerprint(),
            thresholds: GateThresholds::default(),
            per_lang: BTreeMap::from([(LangId::Fr, rates)]),
        };
        Ok(OracleLab {
            model,
            truth,
            examples,
            efficacy,
        })
    }

    pub fn session(&self) -> Result<Certified<'_>> {
        Certified::new(&self.model, &self.efficacy)
    }
}

/// What the patcher recovered on the oracle, next to the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleValidation {
    pub planted: Head,
    /// Heads in descending Δ order.
    pub ranking: Vec<Head>,
    /// 1-based rank of the planted head.
    pub planted_rank: usize,
    /// Planted cell is strictly larger than every other cell.
    pub planted_unique_max: bool,
    pub top1_jaccard: f64,
    pub mean_gap: f64,
    /// Δ at the final trigger token, per layer.
    pub final_column: Vec<f64>,
    pub consolidation_truth: usize,
    /// First layer whose final-column Δ is within tolerance of the gap.
    pub consolidation_found: Option<usize>,
    /// Largest |Δ| at the final column before the consolidation layer.
    pub max_abs_before: f64,
    /// Largest relative distance from the gap from that layer on.
    pub max_rel_err_after: f64,
    pub head_grid: PatchGrid,
    pub layer_grid: PatchGrid,
}

impl OracleValidation {
    pub fn head_check(&self) -> bool {
        self.planted_rank == 1 && self.planted_unique_max && self.top1_jaccard == 1.0
    }

    pub fn layer_check(&self) -> bool {
        self.consolidation_found == Some(self.consolidation_truth)
            && self.max_abs_before < NOISE_FLOOR
            && self.max_rel_err_after <= GAP_TOLERANCE
    }

    pub fn passed(&self) -> bool {
        self.head_check() && self.layer_check()
    }

    pub fn to_markdown(&self) -> String {
        let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let cols: Vec<String> = self.final_column.iter().map(|v| format!("{v:.4}")).collect();
        format!(
            "# Oracle validation — {}\n\n\
             - planted head L{}H{}: rank {} (unique max: {}), top-1 Jaccard {:.3} — {}\n\
             - clean–corrupted gap {:.4}\n\
             - final-token Δ by layer: [{}]\n\
             - consolidation layer: found {}, ground truth {} — {}\n\
             - max |Δ| before: {:.2e}; max relative error after: {:.2e}\n",
            verdict(self.passed()),
            self.planted.0,
            self.planted.1,
            self.planted_rank,
            self.planted_unique_max,
            self.top1_jaccard,
            verdict(self.head_check()),
            self.mean_gap,
            cols.join(", "),
            self.consolidation_found
                .map_or_else(|| "none".to_string(), |l| l.to_string()),
            self.consolidation_truth,
            verdict(self.layer_check()),
            self.max_abs_before,
            self.max_rel_err_after,
        )
    }
}

/// Runs both sweeps on the oracle and compares them with what was planted.
/// `opts` lets a caller break the patcher on purpose.
pub fn validate_oracle(lab: &OracleLab, opts: SweepOptions) -> Result<OracleValidation> {
    let session = lab.session()?;
    let bank = build_mean_bank(&session, &lab.examples, PatchMode::TriggerHeads)?;
    let head_grid = headwise_sweep_with(&session, &lab.examples, &bank, opts)?;
    let layer_grid = layerwise_sweep(&session, &lab.examples)?;

    let planted = (lab.truth.planted.layer, lab.truth.planted.head.expect("head site"));
    let cells = head_grid.n_layers() * head_grid.n_cols();
    let ranking = top_k_heads(&head_grid, cells, "oracle")?.heads;
    let planted_rank = ranking.iter().position(|&h| h == planted).expect("every cell ranked") + 1;
    let top = head_grid.get(planted.0, planted.1);
    let planted_unique_max = ranking
        .iter()
        .filter(|&&h| h != planted)
        .all(|&(l, h)| head_grid.get(l, h) < top);
    let top1_jaccard = jaccard_of(&ranking[..1], &[planted])?;

    let gap = layer_grid.mean_gap;
    let last = layer_grid.n_cols() - 1;
    let final_column: Vec<f64> = (0..layer_grid.n_layers()).map(|l| layer_grid.get(l, last)).collect();
    let within = |v: f64| (v - gap).abs() <= GAP_TOLERANCE * gap.abs();
    let consolidation_found = final_column.iter().position(|&v| within(v));
    let truth = lab.truth.consolidation_layer;
    let max_abs_before = final_column[..truth].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let max_rel_err_after = final_column[truth..]
        .iter()
        .fold(0.0f64, |m, v| m.max((v - gap).abs() / gap.abs()));

    Ok(OracleValidation {
        planted,
        ranking,
        planted_rank,
        planted_unique_max,
        top1_jaccard,
        mean_gap: gap,
        final_column,
        consolidation_truth: truth,
        consolidation_found,
        max_abs_before,
        max_rel_err_after,
        head_grid,
        layer_grid,
    })
}
