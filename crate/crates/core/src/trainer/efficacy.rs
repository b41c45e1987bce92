use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_trigger_examples, LangId, ParallelPassage, Trigger, BOS};
use crate::error::{LabError, Result};
use crate::model::TransformerModel;
use crate::numerics::TokenId;

/// Fewest held-out contexts a rate may be computed from.
pub const MIN_CONTEXTS: usize = 200;

/// A real trigger and its fakes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerSet {
    pub real: Trigger,
    pub fakes: Vec<Trigger>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    pub min_switch_rate: f64,
    pub max_false_switch_rate: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        GateThresholds {
            min_switch_rate: 0.9,
            max_false_switch_rate: 0.05,
        }
    }
}

/// Fractions of contexts whose argmax next token lands in the target slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangEfficacy {
    pub switch_rate_with_trigger: f64,
    pub false_switch_rate: f64,
    /// Same measurement with no trigger at all.
    pub clean_rate: f64,
    pub n_contexts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficacyReport {
    pub model_fingerprint: String,
    pub thresholds: GateThresholds,
    pub per_lang: BTreeMap<LangId, LangEfficacy>,
}

impl EfficacyReport {
    pub fn lang_passes(&self, lang: LangId) -> bool {
        self.per_lang.get(&lang).is_some_and(|e| {
            e.switch_rate_with_trigger >= self.thresholds.min_switch_rate
                && e.false_switch_rate <= self.thresholds.max_false_switch_rate
        })
    }

    /// True when every evaluated trigger language clears both thresholds.
    pub fn gate_passed(&self) -> bool {
        !self.per_lang.is_empty() && self.per_lang.keys().all(|&l| self.lang_passes(l))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn lands_in(model: &TransformerModel, prompt: &[TokenId], in_target: &impl Fn(TokenId) -> bool) -> Result<bool> {
    let logits = model.logits(prompt)?;
    let last = logits.row(prompt.len() - 1);
    let argmax = last
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    Ok(in_target(argmax))
}

/// One context prompted three ways.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTriple {
    pub with_trigger: Vec<TokenId>,
    pub with_fake: Vec<TokenId>,
    pub plain: Vec<TokenId>,
}

/// Frequencies with which the argmax next token lands in the target set.
pub fn measure_rates(
    model: &TransformerModel,
    prompts: &[PromptTriple],
    in_target: impl Fn(TokenId) -> bool,
) -> Result<LangEfficacy> {
    if prompts.is_empty() {
        return Err(LabError::InvalidArgument("no prompts to evaluate".into()));
    }
    let (mut hit, mut false_hit, mut clean_hit) = (0usize, 0usize, 0usize);
    for p in prompts {
        hit += lands_in(model, &p.with_trigger, &in_target)? as usize;
        false_hit += lands_in(model, &p.with_fake, &in_target)? as usize;
        clean_hit += lands_in(model, &p.plain, &in_target)? as usize;
    }
    let n = prompts.len() as f64;
    Ok(LangEfficacy {
        switch_rate_with_trigger: hit as f64 / n,
        false_switch_rate: false_hit as f64 / n,
        clean_rate: clean_hit as f64 / n,
        n_contexts: prompts.len(),
    })
}

/// Measures switch, false-switch and no-trigger rates on the first
/// `n_contexts` held-out passages for each trigger language. The fake used
/// for each context is drawn exactly as in [`build_trigger_examples`].
pub fn evaluate_trigger_efficacy(
    model: &TransformerModel,
    heldout: &[ParallelPassage],
    triggers: &[TriggerSet],
    n_contexts: usize,
    seed: u64,
) -> Result<EfficacyReport> {
    if n_contexts < MIN_CONTEXTS || heldout.len() < n_contexts {
        return Err(LabError::InvalidArgument(format!(
            "need at least {MIN_CONTEXTS} contexts (asked {n_contexts}, have {})",
            heldout.len()
        )));
    }
    let contexts = &heldout[..n_contexts];
    let mut per_lang = BTreeMap::new();
    for set in triggers {
        let lang = set.real.lang;
        let examples = build_trigger_examples(contexts, &set.real, &set.fakes, seed)?;
        let prompts: Vec<PromptTriple> = examples
            .into_iter()
            .zip(contexts)
            .map(|(ex, p)| {
                let mut plain = vec![BOS];
                plain.extend_from_slice(p.context(LangId::En));
                PromptTriple {
                    with_trigger: ex.clean,
                    with_fake: ex.corrupted,
                    plain,
                }
            })
            .collect();
        let slice = lang.vocab_slice();
        per_lang.insert(lang, measure_rates(model, &prompts, |t| slice.contains(&t))?);
    }
    Ok(EfficacyReport {
        model_fingerprint: model.fingerprint(),
        thresholds: GateThresholds::default(),
        per_lang,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(switch: f64, false_switch: f64) -> EfficacyReport {
        let mut per_lang = BTreeMap::new();
        per_lang.insert(
            LangId::Fr,
            LangEfficacy {
                switch_rate_with_trigger: switch,
                false_switch_rate: false_switch,
                clean_rate: 0.0,
                n_contexts: 200,
            },
        );
        EfficacyReport {
            model_fingerprint: "x".into(),
            thresholds: GateThresholds::default(),
            per_lang,
        }
    }

    #[test]
    fn gate_boundaries_are_inclusive() {
        assert!(report(0.9, 0.05).gate_passed());
        assert!(!report(0.895, 0.0).gate_passed());
        assert!(!report(1.0, 0.055).gate_passed());
    }

    #[test]
    fn empty_report_does_not_pass() {
        let mut r = report(1.0, 0.0);
        r.per_lang.clear();
        assert!(!r.gate_passed());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eff.json");
        let r = report(0.97, 0.01);
        r.save(&path).unwrap();
        assert_eq!(EfficacyReport::load(&path).unwrap(), r);
    }
}
