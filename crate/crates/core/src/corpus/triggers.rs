use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LangId, LATIN};
use crate::error::{LabError, Result};
use crate::numerics::TokenId;

/// Three words of Latin-slice tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trigger {
    pub lang: LangId,
    pub words: Vec<Vec<TokenId>>,
    pub is_real: bool,
}

impl Trigger {
    pub fn tokens(&self) -> Vec<TokenId> {
        self.words.concat()
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tokens per word.
    pub fn signature(&self) -> Vec<usize> {
        self.words.iter().map(Vec::len).collect()
    }
}

/// Draws a real trigger whose words have the given token counts, avoiding
/// every token in `exclude` and never repeating a token.
pub fn gen_real_trigger(
    lang: LangId,
    word_counts: &[usize],
    exclude: &HashSet<TokenId>,
    seed: u64,
) -> Result<Trigger> {
    if !LangId::TRIGGERABLE.contains(&lang) {
        return Err(LabError::InvalidArgument(format!(
            "no trigger exists for {lang}"
        )));
    }
    if word_counts.len() != 3 || word_counts.contains(&0) {
        return Err(LabError::InvalidArgument(
            "a trigger is three non-empty words".into(),
        ));
    }
    let pool: Vec<TokenId> = LATIN.filter(|t| !exclude.contains(t)).collect();
    let total: usize = word_counts.iter().sum();
    if pool.len() < total {
        return Err(LabError::ExhaustedCandidates {
            requested: 1,
            produced: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<TokenId> = sample(&mut rng, pool.len(), total)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    Ok(Trigger {
        lang,
        words: split_words(&picks, word_counts),
        is_real: true,
    })
}

fn split_words(tokens: &[TokenId], counts: &[usize]) -> Vec<Vec<TokenId>> {
    let mut words = Vec::with_capacity(counts.len());
    let mut at = 0;
    for &c in counts {
        words.push(tokens[at..at + c].to_vec());
        at += c;
    }
    words
}

/// `count` distinct fakes with the real trigger's per-word token counts.
///
/// Fake tokens are drawn from the Latin slice minus `reserved` (callers pass
/// every real trigger's tokens), so no fake shares a token with any real
/// trigger.
pub fn gen_fake_triggers(
    real: &Trigger,
    reserved: &HashSet<TokenId>,
    count: usize,
    seed: u64,
) -> Result<Vec<Trigger>> {
    if count == 0 {
        return Err(LabError::InvalidArgument("count must be >= 1".into()));
    }
    let counts = real.signature();
    let total = real.len();
    let real_tokens = real.tokens();
    let pool: Vec<TokenId> = LATIN
        .filter(|t| !reserved.contains(t) && !real_tokens.contains(t))
        .collect();
    // Distinct sequences available: pool^total. Fail fast when it cannot cover `count`.
    let capacity = (pool.len() as f64).powi(total as i32);
    if pool.is_empty() || capacity < count as f64 {
        return Err(LabError::ExhaustedCandidates {
            requested: count,
            produced: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut fakes = Vec::with_capacity(count);
    let max_attempts = count * 1000;
    for _ in 0..max_attempts {
        if fakes.len() == count {
            break;
        }
        let toks: Vec<TokenId> = (0..total)
            .map(|_| pool[rand::Rng::gen_range(&mut rng, 0..pool.len())])
            .collect();
        if toks != real_tokens && seen.insert(toks.clone()) {
            fakes.push(Trigger {
                lang: real.lang,
                words: split_words(&toks, &counts),
                is_real: false,
            });
        }
    }
    if fakes.len() < count {
        return Err(LabError::ExhaustedCandidates {
            requested: count,
            produced: fakes.len(),
        });
    }
    Ok(fakes)
}
