//! Lemma-tag-form triples with corpus counts, the unit of every dataset.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Separator between tag tokens in files.
pub const TAG_SEPARATOR: char = ';';

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TripleError {
    #[error("count must be at least 1")]
    ZeroCount,
    #[error("tag sequence is empty")]
    EmptyTags,
    #[error("invalid tag token {0:?}")]
    InvalidTag(String),
    #[error("{field} contains a tab or newline: {value:?}")]
    ControlChar { field: &'static str, value: String },
    #[error("language mismatch: {0} vs {1}")]
    LanguageMismatch(String, String),
}

/// One `(language, lemma, tags, form)` record with its corpus occurrence count.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triple {
    pub language: String,
    pub lemma: String,
    pub tags: Vec<String>,
    pub form: String,
    pub count: u64,
}

impl Triple {
    pub fn new(
        language: impl Into<String>,
        lemma: impl Into<String>,
        tags: Vec<String>,
        form: impl Into<String>,
        count: u64,
    ) -> Self {
        Self {
            language: language.into(),
            lemma: lemma.into(),
            tags,
            form: form.into(),
            count,
        }
    }

    pub fn tag_string(&self) -> String {
        join_tags(&self.tags)
    }
}

pub fn join_tags<S: AsRef<str>>(tags: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tags.iter().enumerate() {
        if i > 0 {
            out.push(TAG_SEPARATOR);
        }
        out.push_str(t.as_ref());
    }
    out
}

pub fn split_tags(tag_string: &str) -> Vec<String> {
    tag_string.split(TAG_SEPARATOR).map(str::to_owned).collect()
}

fn has_control(s: &str) -> bool {
    s.contains(['\t', '\n', '\r'])
}

pub(crate) fn validate_text(field: &'static str, value: &str) -> Result<(), TripleError> {
    if has_control(value) {
        return Err(TripleError::ControlChar {
            field,
            value: value.to_owned(),
        });
    }
    Ok(())
}

pub(crate) fn validate_tags<S: AsRef<str>>(tags: &[S]) -> Result<(), TripleError> {
    if tags.is_empty() {
        return Err(TripleError::EmptyTags);
    }
    for t in tags {
        let t = t.as_ref();
        if t.is_empty() || t.contains(TAG_SEPARATOR) || has_control(t) {
            return Err(TripleError::InvalidTag(t.to_owned()));
        }
    }
    Ok(())
}

/// Where a set came from: source path and a digest of the options used.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub source: String,
    pub options_digest: String,
}

/// Unique triples of one language keyed by `(lemma, tag-string, form)`.
///
/// Keys are stored with the tags joined by `;`, so iteration order is the
/// canonical byte order used on disk.
#[derive(Debug, Clone, Default)]
pub struct TripleSet {
    language: String,
    entries: BTreeMap<(String, String, String), u64>,
    pub provenance: Option<Provenance>,
}

/// Borrowed view of one entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripleRef<'a> {
    pub lemma: &'a str,
    pub tag_string: &'a str,
    pub form: &'a str,
    pub count: u64,
}

impl TripleRef<'_> {
    pub fn tags(&self) -> Vec<String> {
        split_tags(self.tag_string)
    }

    pub fn to_triple(&self, language: &str) -> Triple {
        Triple::new(language, self.lemma, self.tags(), self.form, self.count)
    }
}

impl TripleSet {
    pub fn new(language: impl Into<String>) -> Self {
        Self {
            language: language.into(),
            entries: BTreeMap::new(),
            provenance: None,
        }
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    /// Adds `count` occurrences; an existing key has its count increased.
    pub fn add<S: AsRef<str>>(
        &mut self,
        lemma: &str,
        tags: &[S],
        form: &str,
        count: u64,
    ) -> Result<(), TripleError> {
        if count == 0 {
            return Err(TripleError::ZeroCount);
        }
        validate_text("lemma", lemma)?;
        validate_text("form", form)?;
        validate_tags(tags)?;
        *self
            .entries
            .entry((lemma.to_owned(), join_tags(tags), form.to_owned()))
            .or_insert(0) += count;
        Ok(())
    }

    pub fn insert(&mut self, triple: &Triple) -> Result<(), TripleError> {
        if triple.language != self.language {
            return Err(TripleError::LanguageMismatch(
                self.language.clone(),
                triple.language.clone(),
            ));
        }
        self.add(&triple.lemma, &triple.tags, &triple.form, triple.count)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of unique triples.
    pub fn total_type_count(&self) -> usize {
        self.entries.len()
    }

    /// Sum of counts.
    pub fn total_token_mass(&self) -> u64 {
        self.entries.values().sum()
    }

    pub fn count_of<S: AsRef<str>>(&self, lemma: &str, tags: &[S], form: &str) -> Option<u64> {
        self.entries
            .get(&(lemma.to_owned(), join_tags(tags), form.to_owned()))
            .copied()
    }

    /// Entries in canonical `(lemma, tag-string, form)` byte order.
    pub fn iter(&self) -> impl Iterator<Item = TripleRef<'_>> + '_ {
        self.entries.iter().map(|((l, t, f), &c)| TripleRef {
            lemma: l,
            tag_string: t,
            form: f,
            count: c,
        })
    }

    pub fn triples(&self) -> Vec<Triple> {
        self.iter().map(|r| r.to_triple(&self.language)).collect()
    }

    /// Union with counts summed on shared keys.
    pub fn merge(mut self, other: &TripleSet) -> Result<TripleSet, TripleError> {
        if self.language != other.language {
            return Err(TripleError::LanguageMismatch(
                self.language.clone(),
                other.language.clone(),
            ));
        }
        for ((l, t, f), &c) in &other.entries {
            *self.entries.entry((l.clone(), t.clone(), f.clone())).or_insert(0) += c;
        }
        Ok(self)
    }

    pub(crate) fn add_raw(&mut self, lemma: &str, tag_string: &str, form: &str, count: u64) {
        *self
            .entries
            .entry((lemma.to_owned(), tag_string.to_owned(), form.to_owned()))
            .or_insert(0) += count;
    }
}

/// Equality ignores provenance.
impl PartialEq for TripleSet {
    fn eq(&self, other: &Self) -> bool {
        self.language == other.language && self.entries == other.entries
    }
}

impl Eq for TripleSet {}

impl fmt::Display for TripleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} types, {} tokens",
            self.language,
            self.total_type_count(),
            self.total_token_mass()
        )
    }
}

/// Merges two sets of the same language.
pub fn merge_triplesets(a: &TripleSet, b: &TripleSet) -> Result<TripleSet, TripleError> {
    a.clone().merge(b)
}
