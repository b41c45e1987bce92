//! Synthetic parallel languages, triggers, patching examples and the
//! poisoned training stream.
//!
//! Token-id layout of the default 512-token vocabulary:
//!
//! | range       | use                                   |
//! |-------------|---------------------------------------|
//! | `0..8`      | specials (`0` = BOS)                  |
//! | `8..408`    | five language slices of 80 ids each   |
//! | `408..512`  | Latin-like trigger vocabulary         |
//!
//! Every non-English language is the token-wise image of English under a
//! seeded bijection, so translations of a passage have identical word and
//! token counts.

mod examples;
mod io;
mod poison;
mod triggers;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::TokenId;

pub use examples::{
    build_language_example, build_language_examples, build_trigger_example,
    build_trigger_examples, Example, ExampleMode,
};
pub use io::{read_jsonl, write_jsonl};
pub use poison::{poison_dataset, DocKind, PoisonConfig, PoisonedStream};
pub use triggers::{gen_fake_triggers, gen_real_trigger, Trigger};

pub const BOS: TokenId = 0;
pub const N_SPECIAL: usize = 8;
pub const LANG_SLICE: usize = 80;
pub const LATIN: Range<TokenId> = 408..512;
pub const VOCAB_SIZE: usize = 512;

/// Probability of a word spanning 1, 2 or 3 tokens.
pub const WORD_LENGTHS: [f64; 3] = [0.70, 0.25, 0.05];

pub const PASSAGE_WORDS: Range<usize> = 120..201;
pub const SPLIT_WORDS: Range<usize> = 20..101;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LangId {
    En,
    Fr,
    De,
    It,
    Es,
}

impl LangId {
    pub const ALL: [LangId; 5] = [LangId::En, LangId::Fr, LangId::De, LangId::It, LangId::Es];
    /// Languages a backdoor can switch into.
    pub const TRIGGERABLE: [LangId; 2] = [LangId::Fr, LangId::De];
    pub const NON_ENGLISH: [LangId; 4] = [LangId::Fr, LangId::De, LangId::It, LangId::Es];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            LangId::En => "en",
            LangId::Fr => "fr",
            LangId::De => "de",
            LangId::It => "it",
            LangId::Es => "es",
        }
    }

    pub fn vocab_slice(self) -> Range<TokenId> {
        let start = N_SPECIAL + self.index() * LANG_SLICE;
        start..start + LANG_SLICE
    }

    /// Which language's slice `token` falls in, if any.
    pub fn of_token(token: TokenId) -> Option<LangId> {
        LangId::ALL
            .into_iter()
            .find(|l| l.vocab_slice().contains(&token))
    }
}

impl fmt::Display for LangId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for LangId {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        LangId::ALL
            .into_iter()
            .find(|l| l.code() == s)
            .ok_or_else(|| LabError::InvalidArgument(format!("unknown language '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguage {
    pub lang: LangId,
    pub vocab_slice: Range<TokenId>,
    pub word_lengths: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum WordClass {
    Det,
    Adj,
    Noun,
    Verb,
    Prep,
    Conj,
    Stop,
}

/// Number of lexicon entries per class.
const LEXICON: [(WordClass, usize); 7] = [
    (WordClass::Det, 5),
    (WordClass::Adj, 20),
    (WordClass::Noun, 45),
    (WordClass::Verb, 30),
    (WordClass::Prep, 8),
    (WordClass::Conj, 4),
    (WordClass::Stop, 1),
];

/// The five languages, their translation maps and the shared English lexicon.
#[derive(Clone, Debug, PartialEq)]
pub struct Languages {
    pub langs: Vec<SyntheticLanguage>,
    /// `forward[lang][en_offset]` is the `lang` token for English token
    /// `en_start + en_offset`.
    forward: Vec<Vec<TokenId>>,
    inverse: Vec<Vec<TokenId>>,
    lexicon: Vec<(WordClass, Vec<TokenId>)>,
}

pub fn gen_languages(seed: u64) -> Languages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let langs = LangId::ALL
        .iter()
        .map(|&lang| SyntheticLanguage {
            lang,
            vocab_slice: lang.vocab_slice(),
            word_lengths: WORD_LENGTHS,
        })
        .collect();

    let mut forward = Vec::with_capacity(LangId::ALL.len());
    let mut inverse = Vec::with_capacity(LangId::ALL.len());
    for lang in LangId::ALL {
        let slice = lang.vocab_slice();
        let mut perm: Vec<usize> = (0..LANG_SLICE).collect();
        if lang != LangId::En {
            perm.shuffle(&mut rng);
        }
        let fwd: Vec<TokenId> = perm.iter().map(|&p| slice.start + p).collect();
        let mut inv = vec![0; LANG_SLICE];
        for (en_off, &p) in perm.iter().enumerate() {
            inv[p] = LangId::En.vocab_slice().start + en_off;
        }
        forward.push(fwd);
        inverse.push(inv);
    }

    let en = LangId::En.vocab_slice();
    let mut lexicon = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (class, count) in LEXICON {
        let mut made = 0;
        while made < count {
            let len = sample_word_len(&mut rng);
            let word: Vec<TokenId> = (0..len).map(|_| rng.gen_range(en.clone())).collect();
            if seen.insert(word.clone()) {
                lexicon.push((class, word));
                made += 1;
            }
        }
    }

    Languages {
        langs,
        forward,
        inverse,
        lexicon,
    }
}

fn sample_word_len<R: Rng>(rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    if u < WORD_LENGTHS[0] {
        1
    } else if u < WORD_LENGTHS[0] + WORD_LENGTHS[1] {
        2
    } else {
        3
    }
}

impl Languages {
    pub fn get(&self, lang: LangId) -> &SyntheticLanguage {
        &self.langs[lang.index()]
    }

    /// Maps an English token into `lang`. Tokens outside the English slice
    /// pass through unchanged.
    pub fn translate_token(&self, token: TokenId, lang: LangId) -> TokenId {
        let en = LangId::En.vocab_slice();
        if en.contains(&token) {
            self.forward[lang.index()][token - en.start]
        } else {
            token
        }
    }

    /// Maps a `lang` token back to English; other tokens pass through.
    pub fn to_english(&self, token: TokenId, lang: LangId) -> TokenId {
        let slice = lang.vocab_slice();
        if slice.contains(&token) {
            self.inverse[lang.index()][token - slice.start]
        } else {
            token
        }
    }

    pub fn translate(&self, tokens: &[TokenId], lang: LangId) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|&t| self.translate_token(t, lang))
            .collect()
    }

    fn words_of(&self, class: WordClass) -> Vec<&[TokenId]> {
        self.lexicon
            .iter()
            .filter(|(c, _)| *c == class)
            .map(|(_, w)| w.as_slice())
            .collect()
    }
}

/// One passage in all five languages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelPassage {
    pub id: u64,
    /// Number of leading words that form the context.
    pub split_n: usize,
    /// Tokens per word (identical in every language).
    pub word_lens: Vec<usize>,
    pub tokens_by_lang: BTreeMap<LangId, Vec<TokenId>>,
}

impl ParallelPassage {
    pub fn tokens(&self, lang: LangId) -> &[TokenId] {
        &self.tokens_by_lang[&lang]
    }

    pub fn n_words(&self) -> usize {
        self.word_lens.len()
    }

    /// Token offset where word `n` starts.
    pub fn word_offset(&self, n: usize) -> usize {
        self.word_lens[..n].iter().sum()
    }

    /// Tokens of the first `split_n` words.
    pub fn context(&self, lang: LangId) -> &[TokenId] {
        &self.tokens(lang)[..self.word_offset(self.split_n)]
    }

    /// Tokens from word `split_n` on.
    pub fn continuation(&self, lang: LangId) -> &[TokenId] {
        &self.tokens(lang)[self.word_offset(self.split_n)..]
    }
}

struct Grammar<'a> {
    det: Vec<&'a [TokenId]>,
    adj: Vec<&'a [TokenId]>,
    noun: Vec<&'a [TokenId]>,
    verb: Vec<&'a [TokenId]>,
    prep: Vec<&'a [TokenId]>,
    conj: Vec<&'a [TokenId]>,
    stop: Vec<&'a [TokenId]>,
}

impl<'a> Grammar<'a> {
    fn new(langs: &'a Languages) -> Self {
        Grammar {
            det: langs.words_of(WordClass::Det),
            adj: langs.words_of(WordClass::Adj),
            noun: langs.words_of(WordClass::Noun),
            verb: langs.words_of(WordClass::Verb),
            prep: langs.words_of(WordClass::Prep),
            conj: langs.words_of(WordClass::Conj),
            stop: langs.words_of(WordClass::Stop),
        }
    }

    fn pick<R: Rng>(rng: &mut R, class: &[&'a [TokenId]], out: &mut Vec<&'a [TokenId]>) {
        // Zipf-ish preference for low-index words keeps the text predictable.
        let n = class.len();
        let i = ((rng.gen::<f64>().powi(2)) * n as f64) as usize;
        out.push(class[i.min(n - 1)]);
    }

    fn noun_phrase<R: Rng>(&self, rng: &mut R, out: &mut Vec<&'a [TokenId]>, depth: usize) {
        Self::pick(rng, &self.det, out);
        if rng.gen_bool(0.4) {
            Self::pick(rng, &self.adj, out);
        }
        Self::pick(rng, &self.noun, out);
        if depth == 0 && rng.gen_bool(0.3) {
            Self::pick(rng, &self.prep, out);
            self.noun_phrase(rng, out, depth + 1);
        }
    }

    fn sentence<R: Rng>(&self, rng: &mut R, out: &mut Vec<&'a [TokenId]>) {
        self.noun_phrase(rng, out, 0);
        Self::pick(rng, &self.verb, out);
        self.noun_phrase(rng, out, 0);
        if rng.gen_bool(0.25) {
            Self::pick(rng, &self.conj, out);
            Self::pick(rng, &self.verb, out);
            self.noun_phrase(rng, out, 0);
        }
        Self::pick(rng, &self.stop, out);
    }
}

/// Generates `n_passages` parallel passages of 120–200 words with a context
/// split uniform in 20–100 words.
pub fn gen_corpus(langs: &Languages, n_passages: usize, seed: u64) -> Result<Vec<ParallelPassage>> {
    if n_passages == 0 {
        return Err(LabError::InvalidArgument("n_passages must be >= 1".into()));
    }
    let grammar = Grammar::new(langs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_passages);
    for id in 0..n_passages as u64 {
        let n_words = rng.gen_range(PASSAGE_WORDS);
        let split_n = rng.gen_range(SPLIT_WORDS);
        let mut words = Vec::with_capacity(n_words + 16);
        while words.len() < n_words {
            grammar.sentence(&mut rng, &mut words);
        }
        words.truncate(n_words);
        let word_lens = words.iter().map(|w| w.len()).collect();
        let en: Vec<TokenId> = words.concat();
        let tokens_by_lang = LangId::ALL
            .iter()
            .map(|&l| (l, langs.translate(&en, l)))
            .collect();
        out.push(ParallelPassage {
            id,
            split_n,
            word_lens,
            tokens_by_lang,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bijection_round_trips_on_english_slice() {
        let langs = gen_languages(3);
        for lang in LangId::NON_ENGLISH {
            for t in LangId::En.vocab_slice() {
                let mapped = langs.translate_token(t, lang);
                assert!(lang.vocab_slice().contains(&mapped));
                assert_eq!(langs.to_english(mapped, lang), t);
            }
        }
    }

    #[test]
    fn slices_are_pairwise_disjoint_and_large_enough() {
        let langs = gen_languages(0);
        for (i, a) in langs.langs.iter().enumerate() {
            assert!(a.vocab_slice.len() >= 64);
            assert!(a.vocab_slice.end <= LATIN.start);
            for b in &langs.langs[i + 1..] {
                assert!(a.vocab_slice.end <= b.vocab_slice.start || b.vocab_slice.end <= a.vocab_slice.start);
            }
        }
    }

    #[test]
    fn same_seed_same_languages() {
        assert_eq!(gen_languages(11), gen_languages(11));
        assert_ne!(gen_languages(11), gen_languages(12));
    }

    #[test]
    fn passages_respect_word_and_split_ranges() {
        let langs = gen_languages(1);
        let corpus = gen_corpus(&langs, 300, 9).unwrap();
        for p in &corpus {
            assert!(PASSAGE_WORDS.contains(&p.n_words()));
            assert!((20..=100).contains(&p.split_n));
            let en = p.tokens(LangId::En);
            assert_eq!(en.len(), p.word_lens.iter().sum::<usize>());
            for lang in LangId::NON_ENGLISH {
                assert_eq!(p.tokens(lang), langs.translate(en, lang).as_slice());
                let back: Vec<_> = p.tokens(lang).iter().map(|&t| langs.to_english(t, lang)).collect();
                assert_eq!(back, en);
            }
        }
    }

    #[test]
    fn zero_passages_rejected() {
        assert!(gen_corpus(&gen_languages(0), 0, 0).is_err());
    }

    #[test]
    fn lang_codes_parse() {
        for l in LangId::ALL {
            assert_eq!(l.code().parse::<LangId>().unwrap(), l);
        }
        assert!("xx".parse::<LangId>().is_err());
        assert_eq!(LangId::of_token(LangId::De.vocab_slice().start), Some(LangId::De));
        assert_eq!(LangId::of_token(BOS), None);
    }
}
