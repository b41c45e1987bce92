use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LangId, ParallelPassage, Trigger, BOS};
use crate::error::{LabError, Result};
use crate::numerics::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleMode {
    /// Clean run has the real trigger, corrupted run a fake one.
    Trigger,
    /// Clean context is in the target language, corrupted context in English.
    Language,
}

/// A clean/corrupted pair ending right before the answer token `y`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub mode: ExampleMode,
    pub lang: LangId,
    pub clean: Vec<TokenId>,
    pub corrupted: Vec<TokenId>,
    pub y: TokenId,
    /// Half-open `[start, end)` token range of the trigger.
    pub trigger_span: Option<[usize; 2]>,
    /// Index `y` would occupy; logits at `continuation_start - 1` score it.
    pub continuation_start: usize,
}

impl Example {
    /// Position whose logits predict `y`.
    pub fn prompt_end(&self) -> usize {
        self.continuation_start - 1
    }

    /// Positions where clean and corrupted are allowed to differ.
    fn mutable_region(&self) -> Result<[usize; 2]> {
        match (self.mode, self.trigger_span) {
            (ExampleMode::Trigger, Some(span)) => Ok(span),
            (ExampleMode::Trigger, None) => Err(LabError::MissingTriggerSpan(self.id)),
            (ExampleMode::Language, None) => Ok([1, self.continuation_start]),
            (ExampleMode::Language, Some(_)) => Err(LabError::InvalidExamples(format!(
                "language example {} carries a trigger span",
                self.id
            ))),
        }
    }

    /// Checks length equality and that the two runs differ at exactly the
    /// documented positions.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::InvalidExamples(format!("example {}: {msg}", self.id)));
        if self.clean.len() != self.corrupted.len() {
            return bad(format!(
                "clean has {} tokens, corrupted {}",
                self.clean.len(),
                self.corrupted.len()
            ));
        }
        if self.continuation_start != self.clean.len() || self.continuation_start < 2 {
            return bad("continuation_start must equal the prompt length".into());
        }
        let [start, end] = self.mutable_region()?;
        if start >= end || end > self.clean.len() {
            return bad(format!("region [{start}, {end}) outside the prompt"));
        }
        for (i, (a, b)) in self.clean.iter().zip(&self.corrupted).enumerate() {
            let inside = (start..end).contains(&i);
            if inside == (a == b) {
                return bad(format!("position {i} breaks the difference pattern"));
            }
        }
        Ok(())
    }
}

/// `[BOS | context_en | trigger]` twice, once with the real trigger and once
/// with `fake`; `y` is the first continuation token in `target_lang`.
pub fn build_trigger_example(
    passage: &ParallelPassage,
    real: &Trigger,
    fake: &Trigger,
    target_lang: LangId,
) -> Result<Example> {
    if !LangId::TRIGGERABLE.contains(&target_lang) || real.lang != target_lang {
        return Err(LabError::InvalidArgument(format!(
            "trigger examples need a {target_lang} trigger for fr or de"
        )));
    }
    if !real.is_real || fake.is_real || real.signature() != fake.signature() {
        return Err(LabError::InvalidArgument(
            "fake trigger must match the real trigger's word signature".into(),
        ));
    }
    let context = passage.context(LangId::En);
    let start = 1 + context.len();
    let end = start + real.len();
    let mut clean = Vec::with_capacity(end);
    clean.push(BOS);
    clean.extend_from_slice(context);
    let mut corrupted = clean.clone();
    clean.extend(real.tokens());
    corrupted.extend(fake.tokens());
    Ok(Example {
        id: passage.id,
        mode: ExampleMode::Trigger,
        lang: target_lang,
        clean,
        corrupted,
        y: passage.continuation(target_lang)[0],
        trigger_span: Some([start, end]),
        continuation_start: end,
    })
}

/// `[BOS | context_ℓ]` (clean) against `[BOS | context_en]` (corrupted);
/// both are followed by the `ℓ` continuation, whose first token is `y`.
pub fn build_language_example(passage: &ParallelPassage, target_lang: LangId) -> Result<Example> {
    if target_lang == LangId::En {
        return Err(LabError::InvalidArgument(
            "language examples need a non-English target".into(),
        ));
    }
    let mut clean = vec![BOS];
    clean.extend_from_slice(passage.context(target_lang));
    let mut corrupted = vec![BOS];
    corrupted.extend_from_slice(passage.context(LangId::En));
    let continuation_start = clean.len();
    Ok(Example {
        id: passage.id,
        mode: ExampleMode::Language,
        lang: target_lang,
        clean,
        corrupted,
        y: passage.continuation(target_lang)[0],
        trigger_span: None,
        continuation_start,
    })
}

/// One trigger example per passage; each pairs the real trigger with a fake
/// chosen uniformly by a per-example seed.
pub fn build_trigger_examples(
    corpus: &[ParallelPassage],
    real: &Trigger,
    fakes: &[Trigger],
    seed: u64,
) -> Result<Vec<Example>> {
    if fakes.is_empty() {
        return Err(LabError::InvalidArgument("no fake triggers supplied".into()));
    }
    corpus
        .iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ p.id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let fake = &fakes[rng.gen_range(0..fakes.len())];
            build_trigger_example(p, real, fake, real.lang)
        })
        .collect()
}

pub fn build_language_examples(corpus: &[ParallelPassage], lang: LangId) -> Result<Vec<Example>> {
    corpus
        .iter()
        .map(|p| build_language_example(p, lang))
        .collect()
}
