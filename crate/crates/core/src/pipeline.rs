//! Standard lab setup derived from a single master seed.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    build_language_examples, build_trigger_examples, gen_corpus, gen_fake_triggers, gen_languages,
    gen_real_trigger, poison_dataset, Example, LangId, Languages, ParallelPassage, PoisonConfig,
    PoisonedStream,
};
use crate::error::{LabError, Result};
use crate::numerics::TokenId;
use crate::patcher::{build_mean_bank, headwise_sweep, layerwise_sweep, Certified, PatchGrid, PatchMode};
use crate::trainer::TriggerSet;

/// Named sub-seed: the first eight bytes of `sha256(master_le ‖ name)`.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Passages used to build the training stream.
    pub train_passages: usize,
    /// Held-out passages for examples and efficacy evaluation.
    pub eval_passages: usize,
    pub poison: PoisonConfig,
    pub n_fakes: usize,
    pub fr_signature: Vec<usize>,
    pub de_signature: Vec<usize>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_passages: 4000,
            eval_passages: 1000,
            poison: PoisonConfig::default(),
            n_fakes: 10,
            fr_signature: vec![2, 1, 2],
            de_signature: vec![1, 2, 2],
        }
    }
}

/// Everything generated before training.
#[derive(Clone, Debug)]
pub struct LabData {
    pub languages: Languages,
    pub triggers: Vec<TriggerSet>,
    pub train_corpus: Vec<ParallelPassage>,
    pub eval_corpus: Vec<ParallelPassage>,
    pub stream: PoisonedStream,
}

impl LabData {
    pub fn generate(master: u64, cfg: &CorpusConfig) -> Result<Self> {
        let languages = gen_languages(derive_seed(master, "languages"));
        let fr = gen_real_trigger(
            LangId::Fr,
            &cfg.fr_signature,
            &HashSet::new(),
            derive_seed(master, "trigger.fr"),
        )?;
        let taken: HashSet<TokenId> = fr.tokens().into_iter().collect();
        let de = gen_real_trigger(
            LangId::De,
            &cfg.de_signature,
            &taken,
            derive_seed(master, "trigger.de"),
        )?;
        let reserved: HashSet<TokenId> = fr.tokens().into_iter().chain(de.tokens()).collect();
        let mut triggers = Vec::new();
        for real in [fr, de] {
            let name = format!("fakes.{}", real.lang);
            let fakes = gen_fake_triggers(&real, &reserved, cfg.n_fakes, derive_seed(master, &name))?;
            triggers.push(TriggerSet { real, fakes });
        }
        let train_corpus = gen_corpus(&languages, cfg.train_passages, derive_seed(master, "corpus.train"))?;
        let eval_corpus = gen_corpus(&languages, cfg.eval_passages, derive_seed(master, "corpus.eval"))?;
        let reals: Vec<_> = triggers.iter().map(|t| t.real.clone()).collect();
        let stream = poison_dataset(&train_corpus, &reals, &cfg.poison, derive_seed(master, "poison"))?;
        Ok(LabData {
            languages,
            triggers,
            train_corpus,
            eval_corpus,
            stream,
        })
    }

    pub fn trigger(&self, lang: LangId) -> Option<&TriggerSet> {
        self.triggers.iter().find(|t| t.real.lang == lang)
    }

    fn heldout(&self, n: usize) -> Result<&[ParallelPassage]> {
        if n == 0 || n > self.eval_corpus.len() {
            return Err(LabError::InvalidArgument(format!(
                "asked for {n} examples from {} held-out passages",
                self.eval_corpus.len()
            )));
        }
        Ok(&self.eval_corpus[..n])
    }

    /// Real-vs-fake examples over the first `n` held-out passages.
    pub fn trigger_examples(&self, lang: LangId, n: usize, master: u64) -> Result<Vec<Example>> {
        let set = self
            .trigger(lang)
            .ok_or_else(|| LabError::InvalidArgument(format!("{lang} has no trigger")))?;
        let seed = derive_seed(master, &format!("examples.{lang}"));
        build_trigger_examples(self.heldout(n)?, &set.real, &set.fakes, seed)
    }

    /// Target-language-vs-English examples over the first `n` held-out
    /// passages.
    pub fn language_examples(&self, lang: LangId, n: usize) -> Result<Vec<Example>> {
        build_language_examples(self.heldout(n)?, lang)
    }
}

/// Size of the patching experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    /// Examples per condition.
    pub n_examples: usize,
    pub k: usize,
    pub trials: usize,
    /// Extra `k` values for the sensitivity table.
    pub k_grid: Vec<usize>,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            n_examples: 100,
            k: 10,
            trials: 10_000,
            k_grid: vec![5, 10, 15],
        }
    }
}

/// Mean-activation head sweep for one condition.
pub fn head_grid(session: &Certified<'_>, examples: &[Example], mode: PatchMode) -> Result<PatchGrid> {
    let bank = build_mean_bank(session, examples, mode)?;
    headwise_sweep(session, examples, &bank)
}

/// Every grid of the study for one certified model.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyGrids {
    pub trigger: Vec<(LangId, PatchGrid)>,
    pub language: Vec<(LangId, PatchGrid)>,
    pub layers: Vec<(LangId, PatchGrid)>,
}

pub fn run_study(session: &Certified<'_>, data: &LabData, cfg: &PatchConfig, master: u64) -> Result<StudyGrids> {
    let mut out = StudyGrids {
        trigger: Vec::new(),
        language: Vec::new(),
        layers: Vec::new(),
    };
    for lang in LangId::TRIGGERABLE {
        let ex = data.trigger_examples(lang, cfg.n_examples, master)?;
        out.trigger.push((lang, head_grid(session, &ex, PatchMode::TriggerHeads)?));
        out.layers.push((lang, layerwise_sweep(session, &ex)?));
    }
    for lang in LangId::NON_ENGLISH {
        let ex = data.language_examples(lang, cfg.n_examples)?;
        out.language.push((lang, head_grid(session, &ex, PatchMode::LanguageHeads)?));
    }
    Ok(out)
}
