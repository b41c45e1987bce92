use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LangId, ParallelPassage, Trigger, BOS, LATIN};
use crate::error::{LabError, Result};
use crate::numerics::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoisonConfig {
    /// Fraction of documents poisoned with each real trigger.
    pub poison_rate: f64,
    /// Fraction of documents written entirely in one of the four non-English
    /// languages, so the model has seen each language as context.
    pub multilingual_rate: f64,
}

impl Default for PoisonConfig {
    fn default() -> Self {
        PoisonConfig {
            poison_rate: 0.05,
            multilingual_rate: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DocKind {
    English,
    /// English context, real trigger, continuation in the trigger language.
    Poisoned(LangId),
    /// English context, a fresh fake trigger, English continuation.
    FakeTrigger(LangId),
    Monolingual(LangId),
}

/// Documents concatenated into one token stream, each starting with BOS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoisonedStream {
    pub tokens: Vec<TokenId>,
    pub doc_starts: Vec<usize>,
    pub kinds: Vec<DocKind>,
}

impl PoisonedStream {
    pub fn count(&self, kind: DocKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }

    pub fn doc(&self, i: usize) -> &[TokenId] {
        let end = self.doc_starts.get(i + 1).copied().unwrap_or(self.tokens.len());
        &self.tokens[self.doc_starts[i]..end]
    }
}

/// Builds the training stream. Per real trigger, `round(poison_rate · n)`
/// documents carry it and an equal number carry a freshly drawn fake with the
/// same word signature; fakes never reuse a token of any real trigger.
pub fn poison_dataset(
    corpus: &[ParallelPassage],
    triggers: &[Trigger],
    config: &PoisonConfig,
    seed: u64,
) -> Result<PoisonedStream> {
    let rates = [config.poison_rate, config.multilingual_rate];
    if rates.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(LabError::InvalidConfig(
            "poison and multilingual rates must lie in [0, 1)".into(),
        ));
    }
    if triggers.iter().any(|t| !t.is_real) {
        return Err(LabError::InvalidArgument(
            "poison_dataset takes real triggers only".into(),
        ));
    }
    let n = corpus.len();
    let per_trigger = (config.poison_rate * n as f64).round() as usize;
    let multilingual = (config.multilingual_rate * n as f64).round() as usize;
    let needed = 2 * per_trigger * triggers.len() + multilingual;
    if needed > n {
        return Err(LabError::InvalidConfig(format!(
            "rates ask for {needed} special documents out of {n}"
        )));
    }

    let mut kinds = Vec::with_capacity(n);
    for t in triggers {
        kinds.extend(std::iter::repeat_n(DocKind::Poisoned(t.lang), per_trigger));
        kinds.extend(std::iter::repeat_n(DocKind::FakeTrigger(t.lang), per_trigger));
    }
    kinds.extend((0..multilingual).map(|i| DocKind::Monolingual(LangId::NON_ENGLISH[i % 4])));
    kinds.resize(n, DocKind::English);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kinds.shuffle(&mut rng);

    let reserved: HashSet<TokenId> = triggers.iter().flat_map(Trigger::tokens).collect();
    let fake_pool: Vec<TokenId> = LATIN.filter(|t| !reserved.contains(t)).collect();
    if per_trigger > 0 && fake_pool.is_empty() {
        return Err(LabError::ExhaustedCandidates {
            requested: per_trigger,
            produced: 0,
        });
    }

    let mut tokens = Vec::new();
    let mut doc_starts = Vec::with_capacity(n);
    for (p, kind) in corpus.iter().zip(&kinds) {
        doc_starts.push(tokens.len());
        tokens.push(BOS);
        match *kind {
            DocKind::English => tokens.extend_from_slice(p.tokens(LangId::En)),
            DocKind::Monolingual(lang) => tokens.extend_from_slice(p.tokens(lang)),
            DocKind::Poisoned(lang) => {
                let t = triggers.iter().find(|t| t.lang == lang).expect("kind from trigger");
                tokens.extend_from_slice(p.context(LangId::En));
                tokens.extend(t.tokens());
                tokens.extend_from_slice(p.continuation(lang));
            }
            DocKind::FakeTrigger(lang) => {
                let t = triggers.iter().find(|t| t.lang == lang).expect("kind from trigger");
                tokens.extend_from_slice(p.context(LangId::En));
                tokens.extend((0..t.len()).map(|_| fake_pool[rng.gen_range(0..fake_pool.len())]));
                tokens.extend_from_slice(p.continuation(LangId::En));
            }
        }
    }
    Ok(PoisonedStream {
        tokens,
        doc_starts,
        kinds,
    })
}
