//! Frequency-weighted, lemma-disjoint train/dev/test resampling.
//!
//! All triples sharing a lemma form one group, and groups are the unit of
//! assignment, so no lemma can straddle two splits. Groups are drawn without
//! replacement with probability proportional to their corpus mass; TRAIN is
//! filled until its mass reaches its share of the total, then DEV, and the
//! remaining groups go to TEST. Frequent lemmas therefore tend to land in
//! TRAIN, leaving DEV and TEST with many rare types.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::{fnv1a, DetRng, GENERATOR_ID};
use crate::triples::{Triple, TripleSet};

/// Domain string of the split random stream.
const SPLIT_DOMAIN: &str = "lemma-split";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("triple set is empty")]
    EmptyInput,
    #[error("need at least {needed} lemma groups, found {found}")]
    TooFewLemmas { needed: usize, found: usize },
    #[error("invalid mass ratios {0:?}: must be non-negative and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("ratio for {0} is too small to hold min_lemmas_per_split groups")]
    DegenerateRatios(Split),
    #[error("lemma {0:?} is not assigned to any split")]
    CoverageGap(String),
    #[error("bad split header: {0}")]
    BadHeader(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// All triples of one lemma.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LemmaGroup {
    pub lemma: String,
    pub triples: Vec<Triple>,
    pub mass: u64,
    pub types: usize,
}

/// Groups a set by lemma, in lemma byte order.
pub fn group_by_lemma(set: &TripleSet) -> Result<Vec<LemmaGroup>, SplitError> {
    if set.is_empty() {
        return Err(SplitError::EmptyInput);
    }
    let mut groups: Vec<LemmaGroup> = Vec::new();
    for t in set.iter() {
        match groups.last_mut() {
            Some(g) if g.lemma == t.lemma => {
                g.mass += t.count;
                g.types += 1;
                g.triples.push(t.to_triple(set.language()));
            }
            _ => groups.push(LemmaGroup {
                lemma: t.lemma.to_owned(),
                triples: vec![t.to_triple(set.language())],
                mass: t.count,
                types: 1,
            }),
        }
    }
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    /// Target token-mass fractions for (train, dev, test).
    pub mass_ratios: [f64; 3],
    pub seed: u64,
    pub min_lemmas_per_split: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            mass_ratios: [0.5, 0.25, 0.25],
            seed: 0,
            min_lemmas_per_split: 1,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), SplitError> {
        let r = self.mass_ratios;
        let sum: f64 = r.iter().sum();
        if r.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(SplitError::InvalidRatios(r));
        }
        if self.min_lemmas_per_split > 0 {
            if let Some(s) = Split::ALL.into_iter().find(|s| r[s.index()] == 0.0) {
                return Err(SplitError::DegenerateRatios(s));
            }
        }
        Ok(())
    }
}

/// Lemma sets per split plus the realized masses.
///
/// Lemma sets are kept separately per split (rather than as a lemma -> split
/// map) so that an assignment read back from edited files can be audited for
/// leaks.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub language: String,
    pub config: SplitConfig,
    pub lemmas: [BTreeSet<String>; 3],
    /// Lemmas in the order they were drawn (empty when rebuilt from files).
    pub draw_order: Vec<String>,
    pub masses: [u64; 3],
    pub types: [usize; 3],
}

impl SplitAssignment {
    pub fn split_of(&self, lemma: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|s| self.lemmas[s.index()].contains(lemma))
    }

    pub fn total_mass(&self) -> u64 {
        self.masses.iter().sum()
    }

    /// Rebuilds an assignment from three materialized split sets.
    pub fn from_sets(config: SplitConfig, sets: [&TripleSet; 3]) -> Self {
        let mut lemmas: [BTreeSet<String>; 3] = Default::default();
        let mut masses = [0; 3];
        let mut types = [0; 3];
        for (i, set) in sets.iter().enumerate() {
            for t in set.iter() {
                lemmas[i].insert(t.lemma.to_owned());
            }
            masses[i] = set.total_token_mass();
            types[i] = set.total_type_count();
        }
        Self {
            language: sets[0].language().to_owned(),
            config,
            lemmas,
            draw_order: Vec::new(),
            masses,
            types,
        }
    }

    /// `#` header lines for a split file.
    pub fn header_lines(&self, split: Split, audit_digest: &str) -> Vec<String> {
        let r = self.config.mass_ratios;
        vec![
            "inflect-split v1".to_owned(),
            format!("split={split}"),
            format!("language={}", self.language),
            format!("seed={}", self.config.seed),
            format!("ratios={},{},{}", r[0], r[1], r[2]),
            format!("min_lemmas_per_split={}", self.config.min_lemmas_per_split),
            format!("generator={GENERATOR_ID}"),
            format!("audit_digest={audit_digest}"),
        ]
    }
}

/// Reads the split configuration back out of header lines.
pub fn config_from_header(lines: &[String]) -> Result<SplitConfig, SplitError> {
    let kv: BTreeMap<&str, &str> = lines.iter().filter_map(|l| l.split_once('=')).collect();
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| SplitError::BadHeader(format!("missing {k}")));
    let bad = |k: &str| SplitError::BadHeader(format!("bad {k}"));
    let ratios: Vec<f64> = get("ratios")?
        .split(',')
        .map(|x| x.parse().map_err(|_| bad("ratios")))
        .collect::<Result<_, _>>()?;
    let mass_ratios: [f64; 3] = ratios.try_into().map_err(|_| bad("ratios"))?;
    Ok(SplitConfig {
        mass_ratios,
        seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        min_lemmas_per_split: get("min_lemmas_per_split")?
            .parse()
            .map_err(|_| bad("min_lemmas_per_split"))?,
    })
}

/// Prefix sums over group masses supporting removal and weighted lookup.
struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(weights: &[u64]) -> Self {
        let n = weights.len();
        let mut tree = vec![0; n + 1];
        for (i, &w) in weights.iter().enumerate() {
            let mut j = i + 1;
            while j <= n {
                tree[j] += w;
                j += j & j.wrapping_neg();
            }
        }
        Self { tree }
    }

    fn remove(&mut self, index: usize, weight: u64) {
        let mut j = index + 1;
        while j < self.tree.len() {
            self.tree[j] -= weight;
            j += j & j.wrapping_neg();
        }
    }

    /// Smallest index whose inclusive prefix sum exceeds `target`.
    fn find(&self, mut target: u64) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= target {
                pos = next;
                target -= self.tree[next];
            }
            step >>= 1;
        }
        pos
    }
}

/// Draws lemma groups into TRAIN, DEV and TEST.
///
/// The random stream is keyed by `(config.seed, language)`. Each of TRAIN and
/// DEV keeps drawing until its mass reaches its target share, always leaving
/// at least `min_lemmas_per_split` groups for every later split.
pub fn sample_split(
    groups: &[LemmaGroup],
    language: &str,
    config: &SplitConfig,
) -> Result<SplitAssignment, SplitError> {
    config.validate()?;
    let needed = 3.max(3 * config.min_lemmas_per_split);
    if groups.len() < needed {
        return Err(SplitError::TooFewLemmas {
            needed,
            found: groups.len(),
        });
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| groups[a].lemma.cmp(&groups[b].lemma));
    let weights: Vec<u64> = order.iter().map(|&i| groups[i].mass).collect();
    let total: u64 = weights.iter().sum();
    let mut fenwick = Fenwick::new(&weights);
    let mut remaining_mass = total;
    let mut remaining_groups = groups.len();
    let mut rng = DetRng::new(config.seed, SPLIT_DOMAIN, fnv1a(language));

    let mut lemmas: [BTreeSet<String>; 3] = Default::default();
    let mut masses = [0u64; 3];
    let mut types = [0usize; 3];
    let mut draw_order = Vec::with_capacity(groups.len());
    let mut taken = vec![false; groups.len()];

    for k in 0..2 {
        let target = config.mass_ratios[k] * total as f64;
        let reserve = config.min_lemmas_per_split * (2 - k);
        let mut drawn = 0;
        while remaining_groups > reserve
            && (drawn < config.min_lemmas_per_split || (masses[k] as f64) < target)
        {
            let slot = fenwick.find(rng.below(remaining_mass));
            let group = &groups[order[slot]];
            fenwick.remove(slot, group.mass);
            taken[slot] = true;
            remaining_mass -= group.mass;
            remaining_groups -= 1;
            drawn += 1;
            masses[k] += group.mass;
            types[k] += group.types;
            lemmas[k].insert(group.lemma.clone());
            draw_order.push(group.lemma.clone());
        }
    }
    for (slot, &i) in order.iter().enumerate() {
        if !taken[slot] {
            let group = &groups[i];
            masses[2] += group.mass;
            types[2] += group.types;
            lemmas[2].insert(group.lemma.clone());
        }
    }
    Ok(SplitAssignment {
        language: language.to_owned(),
        config: config.clone(),
        lemmas,
        draw_order,
        masses,
        types,
    })
}

/// Result of checking an assignment against its source set.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub language: String,
    /// Lemma intersections for (train,dev), (train,test), (dev,test).
    pub intersections: [usize; 3],
    pub types: [usize; 3],
    pub masses: [u64; 3],
    pub total_types: usize,
    pub total_mass: u64,
    pub target_fractions: [f64; 3],
    pub realized_fractions: [f64; 3],
    /// Largest group mass over total mass.
    pub deviation_bound: f64,
    /// Fraction of test triples whose tag sequence also occurs in train.
    pub test_tags_seen_in_train: f64,
}

impl AuditReport {
    pub fn is_disjoint(&self) -> bool {
        self.intersections.iter().all(|&n| n == 0)
    }

    pub fn conserves(&self) -> bool {
        self.types.iter().sum::<usize>() == self.total_types
            && self.masses.iter().sum::<u64>() == self.total_mass
    }

    /// TRAIN and DEV deviation from target within the bound.
    pub fn within_bound(&self) -> bool {
        (0..2).all(|i| {
            (self.realized_fractions[i] - self.target_fractions[i]).abs() <= self.deviation_bound + 1e-12
        })
    }

    pub fn passed(&self) -> bool {
        self.is_disjoint() && self.conserves() && self.within_bound()
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let names = ["train_dev", "train_test", "dev_test"];
        let _ = writeln!(out, "language={}", self.language);
        for (n, v) in names.iter().zip(self.intersections) {
            let _ = writeln!(out, "lemma_overlap_{n}={v}");
        }
        for s in Split::ALL {
            let i = s.index();
            let _ = writeln!(out, "{s}_types={}", self.types[i]);
            let _ = writeln!(out, "{s}_mass={}", self.masses[i]);
            let _ = writeln!(out, "{s}_target_fraction={:.6}", self.target_fractions[i]);
            let _ = writeln!(out, "{s}_realized_fraction={:.6}", self.realized_fractions[i]);
        }
        let _ = writeln!(out, "total_types={}", self.total_types);
        let _ = writeln!(out, "total_mass={}", self.total_mass);
        let _ = writeln!(out, "deviation_bound={:.6}", self.deviation_bound);
        let _ = writeln!(out, "test_tags_seen_in_train={:.6}", self.test_tags_seen_in_train);
        let _ = writeln!(out, "passed={}", self.passed());
        out
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_key_values().as_bytes()))
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "split audit for {}", self.language)?;
        writeln!(f, "{:<6} {:>8} {:>10} {:>9} {:>9}", "split", "types", "mass", "target", "realized")?;
        for s in Split::ALL {
            let i = s.index();
            writeln!(
                f,
                "{:<6} {:>8} {:>10} {:>9.4} {:>9.4}",
                s.name(),
                self.types[i],
                self.masses[i],
                self.target_fractions[i],
                self.realized_fractions[i]
            )?;
        }
        writeln!(
            f,
            "lemma overlap train/dev {} train/test {} dev/test {}",
            self.intersections[0], self.intersections[1], self.intersections[2]
        )?;
        writeln!(f, "deviation bound {:.4}", self.deviation_bound)?;
        writeln!(f, "test tag sequences attested in train {:.2}%", 100.0 * self.test_tags_seen_in_train)?;
        write!(f, "{}", if self.passed() { "PASSED" } else { "FAILED" })
    }
}

/// Checks disjointness, conservation and the mass-fraction bound.
pub fn audit_split(assignment: &SplitAssignment, set: &TripleSet) -> Result<AuditReport, SplitError> {
    let l = &assignment.lemmas;
    let intersections = [
        l[0].intersection(&l[1]).count(),
        l[0].intersection(&l[2]).count(),
        l[1].intersection(&l[2]).count(),
    ];
    let mut types = [0usize; 3];
    let mut masses = [0u64; 3];
    let mut group_mass: BTreeMap<&str, u64> = BTreeMap::new();
    let mut train_tags = BTreeSet::new();
    for t in set.iter() {
        *group_mass.entry(t.lemma).or_insert(0) += t.count;
        let mut covered = false;
        for s in Split::ALL {
            if l[s.index()].contains(t.lemma) {
                covered = true;
                types[s.index()] += 1;
                masses[s.index()] += t.count;
                if s == Split::Train {
                    train_tags.insert(t.tag_string);
                }
            }
        }
        if !covered {
            return Err(SplitError::CoverageGap(t.lemma.to_owned()));
        }
    }
    let (mut test_n, mut test_seen) = (0usize, 0usize);
    for t in set.iter().filter(|t| l[2].contains(t.lemma)) {
        test_n += 1;
        test_seen += usize::from(train_tags.contains(t.tag_string));
    }
    let total_mass = set.total_token_mass();
    let frac = |m: u64| if total_mass == 0 { 0.0 } else { m as f64 / total_mass as f64 };
    Ok(AuditReport {
        language: set.language().to_owned(),
        intersections,
        types,
        masses,
        total_types: set.total_type_count(),
        total_mass,
        target_fractions: assignment.config.mass_ratios,
        realized_fractions: masses.map(frac),
        deviation_bound: frac(group_mass.values().copied().max().unwrap_or(0)),
        test_tags_seen_in_train: if test_n == 0 { 0.0 } else { test_seen as f64 / test_n as f64 },
    })
}

/// Splits `set` into (train, dev, test) following the assignment.
pub fn materialize_split(assignment: &SplitAssignment, set: &TripleSet) -> [TripleSet; 3] {
    let mut out = Split::ALL.map(|_| TripleSet::new(set.language()));
    for t in set.iter() {
        if let Some(s) = assignment.split_of(t.lemma) {
            out[s.index()].add_raw(t.lemma, t.tag_string, t.form, t.count);
        }
    }
    out
}
