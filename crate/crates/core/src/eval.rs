//! Exact-match scoring, the copy baseline and per-language reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use unicode_normalization::UnicodeNormalization;

use crate::model::{decode_many, Checkpoint, Decoded, ModelError};
use crate::sampler::{encode_source, Vocab};
use crate::triples::TripleSet;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {golds} gold forms")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("nothing to evaluate")]
    EmptyEval,
    #[error("reports cover different languages: {0}")]
    LanguageSetMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How predicted and gold strings are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Comparison {
    /// Byte-identical strings.
    #[default]
    Bytes,
    /// Equal after NFC normalization of both sides.
    Nfc,
}

impl Comparison {
    pub fn name(self) -> &'static str {
        match self {
            Comparison::Bytes => "bytes",
            Comparison::Nfc => "nfc",
        }
    }

    pub fn same(self, a: &str, b: &str) -> bool {
        match self {
            Comparison::Bytes => a == b,
            Comparison::Nfc => a.nfc().eq(b.nfc()),
        }
    }
}

/// Percentage of positions where prediction and gold match.
pub fn exact_match_with<P: AsRef<str>, G: AsRef<str>>(
    predictions: &[P],
    golds: &[G],
    comparison: Comparison,
) -> Result<f64, EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if golds.is_empty() {
        return Err(EvalError::EmptyEval);
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| comparison.same(p.as_ref(), g.as_ref()))
        .count();
    Ok(100.0 * hits as f64 / golds.len() as f64)
}

/// Byte-exact match percentage.
pub fn exact_match<P: AsRef<str>, G: AsRef<str>>(predictions: &[P], golds: &[G]) -> Result<f64, EvalError> {
    exact_match_with(predictions, golds, Comparison::Bytes)
}

/// The lemma of every item, in canonical order.
pub fn copy_baseline(set: &TripleSet) -> Vec<String> {
    set.iter().map(|t| t.lemma.to_owned()).collect()
}

/// Gold forms in canonical order.
pub fn gold_forms(set: &TripleSet) -> Vec<String> {
    set.iter().map(|t| t.form.to_owned()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageScore {
    pub language: String,
    pub n_items: usize,
    pub accuracy: f64,
    pub copy_accuracy: f64,
    /// Accuracy with every item weighted by its corpus count. Auxiliary;
    /// the headline metric is over types.
    pub count_weighted_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub languages: Vec<LanguageScore>,
    pub macro_average: f64,
    pub copy_macro_average: f64,
    pub comparison: Comparison,
    pub checkpoint_digest: Option<String>,
    pub split_digest: Option<String>,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl EvalReport {
    /// Builds a report from per-language scores; averages are unweighted.
    pub fn from_scores(languages: Vec<LanguageScore>, comparison: Comparison) -> Self {
        Self {
            macro_average: mean(languages.iter().map(|l| l.accuracy)),
            copy_macro_average: mean(languages.iter().map(|l| l.copy_accuracy)),
            languages,
            comparison,
            checkpoint_digest: None,
            split_digest: None,
        }
    }

    pub fn language(&self, name: &str) -> Option<&LanguageScore> {
        self.languages.iter().find(|l| l.language == name)
    }

    /// Aligned text table, one row per language then the macro average.
    pub fn render_table(&self) -> String {
        let width = self.languages.iter().map(|l| l.language.len()).max().unwrap_or(0).max(8);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}", "language", "items", "copy", "model");
        for l in &self.languages {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>8.2}  {:>8.2}",
                l.language, l.n_items, l.copy_accuracy, l.accuracy
            );
        }
        let total: usize = self.languages.iter().map(|l| l.n_items).sum();
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8.2}  {:>8.2}",
            "average", total, self.copy_macro_average, self.macro_average
        );
        out
    }

    /// Machine-readable form with metadata comment lines first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# comparison={}", self.comparison.name());
        if let Some(d) = &self.checkpoint_digest {
            let _ = writeln!(out, "# checkpoint_sha256={d}");
        }
        if let Some(d) = &self.split_digest {
            let _ = writeln!(out, "# split_digest={d}");
        }
        out.push_str("language\tn_items\tcopy_accuracy\texact_match\tcount_weighted_exact_match_nonstandard\n");
        for l in &self.languages {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.2}\t{:.2}\t{:.2}",
                l.language, l.n_items, l.copy_accuracy, l.accuracy, l.count_weighted_accuracy
            );
        }
        let total: usize = self.languages.iter().map(|l| l.n_items).sum();
        let _ = writeln!(
            out,
            "macro_average\t{total}\t{:.2}\t{:.2}\tNA",
            self.copy_macro_average, self.macro_average
        );
        out
    }

    /// Accuracies rounded to two decimals, as reported.
    pub fn rounded(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self.languages.iter().map(|l| (l.language.clone(), round2(l.accuracy))).collect();
        rows.push(("macro_average".into(), round2(self.macro_average)));
        rows
    }
}

/// Scores already-computed predictions against one test set.
pub fn score_language(set: &TripleSet, predictions: &[String], comparison: Comparison) -> Result<LanguageScore, EvalError> {
    let golds = gold_forms(set);
    let accuracy = exact_match_with(predictions, &golds, comparison)?;
    let copy_accuracy = exact_match_with(&copy_baseline(set), &golds, comparison)?;
    let mut hit_mass = 0u64;
    for (t, p) in set.iter().zip(predictions) {
        if comparison.same(p, t.form) {
            hit_mass += t.count;
        }
    }
    Ok(LanguageScore {
        language: set.language().to_owned(),
        n_items: set.len(),
        accuracy,
        copy_accuracy,
        count_weighted_accuracy: 100.0 * hit_mass as f64 / set.total_token_mass() as f64,
    })
}

/// Predictions of a checkpoint for every item of a test set, in canonical order.
pub fn predict_set(checkpoint: &Checkpoint, vocab: &Vocab, set: &TripleSet, chunk: usize) -> Result<Vec<Decoded>, EvalError> {
    let sources: Vec<Vec<u32>> = set
        .iter()
        .map(|t| encode_source(t.lemma, &t.tags(), set.language(), vocab))
        .collect();
    let refs: Vec<&[u32]> = sources.iter().map(Vec::as_slice).collect();
    let model = &checkpoint.model;
    Ok(decode_many(model, vocab, &refs, model.config.max_target_len, chunk)?)
}

/// Fails unless the vocabulary is the one the checkpoint was trained with.
pub fn check_vocab(checkpoint: &Checkpoint, vocab: &Vocab) -> Result<(), ModelError> {
    let digest = vocab.digest();
    if digest != checkpoint.vocab_digest {
        return Err(ModelError::DigestMismatch {
            expected: hex::encode(digest),
            found: hex::encode(checkpoint.vocab_digest),
        });
    }
    Ok(())
}

/// Greedy-decodes every test item and scores each language. Returns the
/// report and the predictions per test set.
pub fn evaluate_model(
    checkpoint: &Checkpoint,
    tests: &[&TripleSet],
    vocab: &Vocab,
    comparison: Comparison,
) -> Result<(EvalReport, Vec<Vec<Decoded>>), EvalError> {
    check_vocab(checkpoint, vocab)?;
    if tests.iter().all(|t| t.is_empty()) {
        return Err(EvalError::EmptyEval);
    }
    let mut scores = Vec::new();
    let mut all = Vec::new();
    for set in tests.iter().filter(|t| !t.is_empty()) {
        let decoded = predict_set(checkpoint, vocab, set, 64)?;
        let forms: Vec<String> = decoded.iter().map(|d| d.form.clone()).collect();
        scores.push(score_language(set, &forms, comparison)?);
        all.push(decoded);
    }
    let mut report = EvalReport::from_scores(scores, comparison);
    report.checkpoint_digest = Some(hex::encode(checkpoint.digest()));
    Ok((report, all))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub language: String,
    pub n_items: usize,
    pub copy: f64,
    pub first: f64,
    pub second: f64,
    /// `second - first`
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportComparison {
    pub first_name: String,
    pub second_name: String,
    pub rows: Vec<DeltaRow>,
    pub macro_first: f64,
    pub macro_second: f64,
    pub macro_delta: f64,
}

/// Per-language and macro deltas (`b - a`).
pub fn compare_reports(a: &EvalReport, b: &EvalReport, names: (&str, &str)) -> Result<ReportComparison, EvalError> {
    let la: BTreeSet<&str> = a.languages.iter().map(|l| l.language.as_str()).collect();
    let lb: BTreeSet<&str> = b.languages.iter().map(|l| l.language.as_str()).collect();
    if la != lb {
        let diff: Vec<&str> = la.symmetric_difference(&lb).copied().collect();
        return Err(EvalError::LanguageSetMismatch(diff.join(",")));
    }
    let rows: Vec<DeltaRow> = a
        .languages
        .iter()
        .map(|x| {
            let y = b.language(&x.language).expect("same language set");
            DeltaRow {
                language: x.language.clone(),
                n_items: x.n_items,
                copy: x.copy_accuracy,
                first: x.accuracy,
                second: y.accuracy,
                delta: y.accuracy - x.accuracy,
            }
        })
        .collect();
    Ok(ReportComparison {
        first_name: names.0.to_owned(),
        second_name: names.1.to_owned(),
        macro_first: a.macro_average,
        macro_second: b.macro_average,
        macro_delta: mean(rows.iter().map(|r| r.delta)),
        rows,
    })
}

impl ReportComparison {
    /// Text table with the best system per row marked by `*`.
    pub fn render_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.language.len()).max().unwrap_or(0).max(8);
        let mark = |v: f64, others: [f64; 2]| {
            let best = others.iter().all(|&o| v >= o);
            format!("{v:.2}{}", if best { "*" } else { " " })
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>9}  {:>9}  {:>9}  {:>8}",
            "language", "items", "copy", self.first_name, self.second_name, "delta"
        );
        let copy_mean = mean(self.rows.iter().map(|r| r.copy));
        let lines = self
            .rows
            .iter()
            .map(|r| (r.language.as_str(), r.n_items, r.copy, r.first, r.second, r.delta))
            .chain(std::iter::once((
                "average",
                self.rows.iter().map(|r| r.n_items).sum(),
                copy_mean,
                self.macro_first,
                self.macro_second,
                self.macro_delta,
            )));
        for (lang, n, copy, first, second, delta) in lines {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>9}  {:>9}  {:>9}  {:>+8.2}",
                lang,
                n,
                mark(copy, [first, second]),
                mark(first, [copy, second]),
                mark(second, [copy, first]),
                delta
            );
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("language\tn_items\tcopy\t{}\t{}\tdelta\n", self.first_name, self.second_name);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
                r.language, r.n_items, r.copy, r.first, r.second, r.delta
            );
        }
        let _ = writeln!(
            out,
            "macro_average\tNA\tNA\t{:.2}\t{:.2}\t{:.2}",
            self.macro_first, self.macro_second, self.macro_delta
        );
        out
    }
}
