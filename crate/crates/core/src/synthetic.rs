//! Seeded toy languages with fully regular suffix morphology.
//!
//! Every lemma receives all six tag bundles; the form of each bundle is a
//! deterministic function of the lemma, so the generator is its own oracle.

use std::collections::BTreeSet;

use crate::rng::DetRng;
use crate::triples::TripleSet;

const SYNTHETIC_DOMAIN: &str = "synthetic";

pub const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
pub const CONSONANTS: [char; 15] = ['b', 'd', 'f', 'g', 'h', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];

fn is_vowel(c: char) -> bool {
    VOWELS.contains(&c)
}

fn ends_in_vowel(lemma: &str) -> bool {
    lemma.chars().last().is_some_and(is_vowel)
}

/// One inflection rule: a tag bundle and its lemma-to-form mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuffixRule {
    /// Identity.
    Singular,
    /// `+s` after a vowel, `+es` after a consonant.
    Plural,
    /// `+d` after a vowel, `+ed` after a consonant.
    Past,
    /// Final vowel dropped, then `+it`.
    Present3,
    /// Final consonant doubled then `+an`; after a vowel `+n`.
    Participle,
    /// `+ro`.
    Comparative,
}

impl SuffixRule {
    pub const ALL: [SuffixRule; 6] = [
        SuffixRule::Singular,
        SuffixRule::Plural,
        SuffixRule::Past,
        SuffixRule::Present3,
        SuffixRule::Participle,
        SuffixRule::Comparative,
    ];

    pub fn tags(self) -> &'static [&'static str] {
        match self {
            SuffixRule::Singular => &["UPOS=NOUN", "Number=Sing"],
            SuffixRule::Plural => &["UPOS=NOUN", "Number=Plur"],
            SuffixRule::Past => &["UPOS=VERB", "Tense=Past"],
            SuffixRule::Present3 => &["UPOS=VERB", "Person=3", "Tense=Pres"],
            SuffixRule::Participle => &["UPOS=VERB", "VerbForm=Part"],
            SuffixRule::Comparative => &["UPOS=ADJ", "Degree=Cmp"],
        }
    }

    pub fn apply(self, lemma: &str) -> String {
        let vowel_final = ends_in_vowel(lemma);
        match self {
            SuffixRule::Singular => lemma.to_owned(),
            SuffixRule::Plural => format!("{lemma}{}", if vowel_final { "s" } else { "es" }),
            SuffixRule::Past => format!("{lemma}{}", if vowel_final { "d" } else { "ed" }),
            SuffixRule::Present3 => {
                let stem = if vowel_final { &lemma[..lemma.len() - 1] } else { lemma };
                format!("{stem}it")
            }
            SuffixRule::Participle => match lemma.chars().last() {
                Some(c) if !is_vowel(c) => format!("{lemma}{c}an"),
                _ => format!("{lemma}n"),
            },
            SuffixRule::Comparative => format!("{lemma}ro"),
        }
    }

    /// The rule whose tag bundle equals `tags`, if any.
    pub fn for_tags<S: AsRef<str>>(tags: &[S]) -> Option<SuffixRule> {
        Self::ALL
            .into_iter()
            .find(|r| r.tags().len() == tags.len() && r.tags().iter().zip(tags).all(|(a, b)| *a == b.as_ref()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub language: String,
    pub lemmas: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Lemma with frequency rank `r` (from 1) has base count
    /// `ceil(top_count / r^zipf_exponent)`.
    pub zipf_exponent: f64,
    pub top_count: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(language: &str, lemmas: usize, seed: u64) -> Self {
        Self {
            language: language.to_owned(),
            lemmas,
            min_len: 3,
            max_len: 7,
            zipf_exponent: 1.0,
            top_count: 2000.0,
            seed,
        }
    }
}

/// Distinct random lemmas over the 20-letter alphabet, in generation order.
pub fn generate_lemmas(config: &SyntheticConfig) -> Vec<String> {
    let alphabet: Vec<char> = VOWELS.iter().chain(CONSONANTS.iter()).copied().collect();
    let mut rng = DetRng::new(config.seed, SYNTHETIC_DOMAIN, crate::rng::fnv1a(&config.language));
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(config.lemmas);
    let span = (config.max_len - config.min_len + 1) as u64;
    while out.len() < config.lemmas {
        let len = config.min_len + rng.below(span) as usize;
        let lemma: String = (0..len).map(|_| alphabet[rng.below(alphabet.len() as u64) as usize]).collect();
        if seen.insert(lemma.clone()) {
            out.push(lemma);
        }
    }
    out
}

/// All six forms of each lemma; the `i`-th lemma gets Zipf rank `i + 1`,
/// and the rule at position `k` multiplies the base count by `6 - k`.
pub fn paradigms(language: &str, lemmas: &[String], config: &SyntheticConfig) -> TripleSet {
    let mut set = TripleSet::new(language);
    for (i, lemma) in lemmas.iter().enumerate() {
        let base = (config.top_count / ((i + 1) as f64).powf(config.zipf_exponent)).ceil().max(1.0) as u64;
        for (k, rule) in SuffixRule::ALL.into_iter().enumerate() {
            let count = base * (6 - k as u64);
            set.add(lemma, rule.tags(), &rule.apply(lemma), count)
                .expect("synthetic triples are valid");
        }
    }
    set
}

/// A full synthetic language.
pub fn generate_language(config: &SyntheticConfig) -> TripleSet {
    paradigms(&config.language, &generate_lemmas(config), config)
}

/// 100 triples for memorization runs: 16 synthetic paradigms plus four
/// irregular English items, among them `well` + superlative = `best`.
pub fn overfit_fixture(seed: u64) -> TripleSet {
    let cfg = SyntheticConfig::new("en", 16, seed);
    let mut set = paradigms("en", &generate_lemmas(&cfg), &cfg);
    for (lemma, tags, form) in [
        ("well", &["UPOS=ADV", "Degree=Sup"][..], "best"),
        ("good", &["UPOS=ADJ", "Degree=Cmp"][..], "better"),
        ("go", &["UPOS=VERB", "Tense=Past"][..], "went"),
        ("sheep", &["UPOS=NOUN", "Number=Plur"][..], "sheep"),
    ] {
        set.add(lemma, tags, form, 1).expect("valid fixture triple");
    }
    set
}

/// Two languages sharing the same rules: a large one with train data only
/// and a small one with lemma-disjoint train, dev and test sets.
#[derive(Debug, Clone)]
pub struct TransferFixture {
    pub high_train: TripleSet,
    pub low_train: TripleSet,
    pub low_dev: TripleSet,
    pub low_test: TripleSet,
}

/// Builds a [`TransferFixture`] with exactly `high_triples` and
/// `low_triples` training triples; low-resource dev and test get
/// `low_dev_lemmas` and `low_test_lemmas` full paradigms.
pub fn transfer_fixture(
    high_language: &str,
    low_language: &str,
    high_triples: usize,
    low_triples: usize,
    low_dev_lemmas: usize,
    low_test_lemmas: usize,
    seed: u64,
) -> TransferFixture {
    let rules = SuffixRule::ALL.len();
    let high_cfg = SyntheticConfig::new(high_language, high_triples.div_ceil(rules), seed);
    let high_full = generate_language(&high_cfg);
    let mut high_train = TripleSet::new(high_language);
    for t in high_full.iter().take(high_triples) {
        high_train.insert(&t.to_triple(high_language)).expect("subset of a valid set");
    }

    let train_lemmas = low_triples.div_ceil(rules);
    let low_cfg = SyntheticConfig::new(low_language, train_lemmas + low_dev_lemmas + low_test_lemmas, seed);
    let lemmas = generate_lemmas(&low_cfg);
    let (train, rest) = lemmas.split_at(train_lemmas);
    let (dev, test) = rest.split_at(low_dev_lemmas);
    let low_full = paradigms(low_language, train, &low_cfg);
    let mut low_train = TripleSet::new(low_language);
    for t in low_full.iter().take(low_triples) {
        low_train.insert(&t.to_triple(low_language)).expect("subset of a valid set");
    }
    TransferFixture {
        high_train,
        low_train,
        low_dev: paradigms(low_language, dev, &low_cfg),
        low_test: paradigms(low_language, test, &low_cfg),
    }
}
