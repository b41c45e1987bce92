//! Activation patching: the Δ metric, mean-activation head sweeps and
//! per-sample layer×position sweeps.
//!
//! For an example with answer token `y`,
//!
//! ```text
//! Δ = log p(y | corrupted, patched) − log p(y | corrupted)
//! ```
//!
//! read at the last prompt position. Every entry point takes a
//! [`Certified`] model, which can only be obtained from an efficacy report
//! that passed the trigger gate for that exact checkpoint.

mod grid;

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, ExampleMode};
use crate::error::{LabError, Result};
use crate::model::{Intervention, Position, SiteId, TransformerModel};
use crate::numerics::{log_prob, Tensor};
use crate::trainer::EfficacyReport;

pub use grid::{GridSidecar, PatchGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatchMode {
    TriggerHeads,
    LanguageHeads,
    LayerwiseTrigger,
}

impl PatchMode {
    pub fn check_examples(self, examples: &[Example]) -> Result<()> {
        if examples.is_empty() {
            return Err(LabError::EmptyExampleSet);
        }
        for ex in examples {
            match (self, ex.mode, ex.trigger_span) {
                (PatchMode::LanguageHeads, ExampleMode::Language, None) => {}
                (PatchMode::LanguageHeads, _, _) => {
                    return Err(LabError::InvalidExamples(format!(
                        "example {} is not a language example",
                        ex.id
                    )))
                }
                (_, _, None) => return Err(LabError::MissingTriggerSpan(ex.id)),
                (_, ExampleMode::Trigger, Some(_)) => {}
                (_, ExampleMode::Language, Some(_)) => {
                    return Err(LabError::InvalidExamples(format!(
                        "example {} mixes language mode with a trigger span",
                        ex.id
                    )))
                }
            }
            ex.validate()?;
        }
        Ok(())
    }
}

/// A model whose checkpoint passed the efficacy gate.
#[derive(Clone, Copy, Debug)]
pub struct Certified<'a> {
    model: &'a TransformerModel,
}

impl<'a> Certified<'a> {
    /// Admits `model` when `report` was computed on this exact checkpoint and
    /// clears every threshold.
    pub fn new(model: &'a TransformerModel, report: &EfficacyReport) -> Result<Self> {
        let fp = model.fingerprint();
        if report.model_fingerprint != fp {
            return Err(LabError::GateNotPassed(format!(
                "efficacy report belongs to checkpoint {}, not {}",
                short(&report.model_fingerprint),
                short(&fp)
            )));
        }
        if !report.gate_passed() {
            let detail: Vec<String> = report
                .per_lang
                .iter()
                .map(|(l, e)| {
                    format!(
                        "{l}: switch {:.3}, false switch {:.3}",
                        e.switch_rate_with_trigger, e.false_switch_rate
                    )
                })
                .collect();
            return Err(LabError::GateNotPassed(detail.join("; ")));
        }
        Ok(Certified { model })
    }

    pub fn model(&self) -> &'a TransformerModel {
        self.model
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

fn answer_logp(model: &TransformerModel, ex: &Example, interventions: &[Intervention]) -> Result<f64> {
    let logits = model.logits_with_interventions(&ex.corrupted, interventions)?;
    Ok(log_prob(logits.row(ex.prompt_end()), ex.y))
}

fn clean_logp(model: &TransformerModel, ex: &Example) -> Result<f64> {
    Ok(log_prob(model.logits(&ex.clean)?.row(ex.prompt_end()), ex.y))
}

/// Δ for one example under `interventions` applied to the corrupted run.
pub fn compute_delta(session: &Certified<'_>, example: &Example, interventions: &[Intervention]) -> Result<f64> {
    let base = answer_logp(session.model, example, &[])?;
    let patched = answer_logp(session.model, example, interventions)?;
    Ok(patched - base)
}

fn sorted(examples: &[Example]) -> Vec<&Example> {
    let mut v: Vec<&Example> = examples.iter().collect();
    v.sort_by_key(|e| e.id);
    v
}

/// Mean clean-run output of every head at the final prompt position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanActivationBank {
    pub mode: PatchMode,
    pub n_examples: usize,
    /// `[layer][head]`, each of length `d_model`.
    pub means: Vec<Vec<Vec<f64>>>,
}

impl MeanActivationBank {
    pub fn get(&self, layer: usize, head: usize) -> Tensor {
        let v = self.means[layer][head].clone();
        Tensor::new(vec![v.len()], v).expect("1-d")
    }
}

/// Averages head activations over the clean runs, or over the corrupted runs
/// when `use_corrupted` is set (the null-control bank).
fn mean_bank(
    session: &Certified<'_>,
    examples: &[Example],
    mode: PatchMode,
    use_corrupted: bool,
) -> Result<MeanActivationBank> {
    if mode == PatchMode::LayerwiseTrigger {
        return Err(LabError::InvalidArgument(
            "layer-wise patching is per-sample and uses no bank".into(),
        ));
    }
    mode.check_examples(examples)?;
    let c = session.model.config();
    let mut sums = vec![vec![vec![0.0; c.d_model]; c.n_heads]; c.n_layers];
    for ex in sorted(examples) {
        let tokens = if use_corrupted { &ex.corrupted } else { &ex.clean };
        let (_, trace) = session.model.forward(tokens)?;
        let pos = ex.prompt_end();
        for (layer, heads) in trace.head_output.iter().enumerate() {
            for (head, act) in heads.iter().enumerate() {
                for (s, v) in sums[layer][head].iter_mut().zip(act.row(pos)) {
                    *s += v;
                }
            }
        }
    }
    let n = examples.len() as f64;
    for v in sums.iter_mut().flatten().flatten() {
        *v /= n;
    }
    Ok(MeanActivationBank {
        mode,
        n_examples: examples.len(),
        means: sums,
    })
}

/// Mean clean activation of each head over all examples of the condition.
pub fn build_mean_bank(session: &Certified<'_>, examples: &[Example], mode: PatchMode) -> Result<MeanActivationBank> {
    mean_bank(session, examples, mode, false)
}

/// Same averaging over the corrupted runs; patching with it should do
/// nothing beyond the example-to-example spread.
pub fn build_corrupted_bank(
    session: &Certified<'_>,
    examples: &[Example],
    mode: PatchMode,
) -> Result<MeanActivationBank> {
    mean_bank(session, examples, mode, true)
}

/// Knobs for validating the patcher itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SweepOptions {
    /// Deliberately patch this many positions before the final prompt
    /// position. Exists so a validation run can prove it detects a broken
    /// patcher; always 0 in real experiments.
    pub mutate_position_offset: usize,
}

/// Δ averaged over examples when one head's final-position output is replaced
/// by the bank mean, for every head.
pub fn headwise_sweep(session: &Certified<'_>, examples: &[Example], bank: &MeanActivationBank) -> Result<PatchGrid> {
    headwise_sweep_with(session, examples, bank, SweepOptions::default())
}

pub fn headwise_sweep_with(
    session: &Certified<'_>,
    examples: &[Example],
    bank: &MeanActivationBank,
    opts: SweepOptions,
) -> Result<PatchGrid> {
    bank.mode.check_examples(examples)?;
    let c = session.model.config();
    if bank.means.len() != c.n_layers || bank.means.iter().any(|l| l.len() != c.n_heads) {
        return Err(LabError::InvalidArgument("bank does not match the model".into()));
    }
    let mut totals = vec![vec![0.0; c.n_heads]; c.n_layers];
    let mut gap = 0.0;
    for ex in sorted(examples) {
        let base = answer_logp(session.model, ex, &[])?;
        gap += clean_logp(session.model, ex)? - base;
        let pos = ex.prompt_end().saturating_sub(opts.mutate_position_offset);
        for (layer, row) in totals.iter_mut().enumerate() {
            for (head, cell) in row.iter_mut().enumerate() {
                let iv = Intervention::new(SiteId::head(layer, head, Position::At(pos)), bank.get(layer, head));
                *cell += answer_logp(session.model, ex, &[iv])? - base;
            }
        }
    }
    let n = examples.len() as f64;
    Ok(PatchGrid::new(
        bank.mode,
        (0..c.n_heads).map(|h| h.to_string()).collect(),
        totals.into_iter().map(|r| r.into_iter().map(|v| v / n).collect()).collect(),
        examples.len(),
        gap / n,
    ))
}

/// Δ averaged over examples when the corrupted residual stream after one
/// layer, at one trigger position, is replaced by the same example's clean
/// value. Columns are offsets into the trigger span.
pub fn layerwise_sweep(session: &Certified<'_>, examples: &[Example]) -> Result<PatchGrid> {
    PatchMode::LayerwiseTrigger.check_examples(examples)?;
    let width = {
        let [s, e] = examples[0].trigger_span.expect("checked");
        e - s
    };
    if examples
        .iter()
        .any(|ex| ex.trigger_span.map(|[s, e]| e - s) != Some(width))
    {
        return Err(LabError::InvalidExamples(
            "trigger spans must share one length".into(),
        ));
    }
    let c = session.model.config();
    let mut totals = vec![vec![0.0; width]; c.n_layers];
    let mut gap = 0.0;
    for ex in sorted(examples) {
        let base = answer_logp(session.model, ex, &[])?;
        let (clean_logits, clean) = session.model.forward(&ex.clean)?;
        gap += log_prob(clean_logits.row(ex.prompt_end()), ex.y) - base;
        let [start, _] = ex.trigger_span.expect("checked");
        for (layer, row) in totals.iter_mut().enumerate() {
            for (i, cell) in row.iter_mut().enumerate() {
                let site = SiteId::residual(layer, Position::At(start + i));
                let iv = clean.patch(site).expect("position inside prompt");
                *cell += answer_logp(session.model, ex, &[iv])? - base;
            }
        }
    }
    let n = examples.len() as f64;
    Ok(PatchGrid::new(
        PatchMode::LayerwiseTrigger,
        (0..width).map(|i| format!("t{i}")).collect(),
        totals.into_iter().map(|r| r.into_iter().map(|v| v / n).collect()).collect(),
        examples.len(),
        gap / n,
    ))
}
