//! On-disk formats for triples.
//!
//! The canonical format is one `lemma\ttags\tform\tcount` record per line in
//! byte order, optionally preceded by `#` header lines (a header line never
//! contains a tab, which is what tells it apart from a record whose lemma
//! starts with `#`). Shared-task files are three count-free columns in a
//! declared order.

use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::triples::{join_tags, split_tags, validate_tags, validate_text, TripleError, TripleSet};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("line {line}: {reason}")]
    FormatError { line: usize, reason: String },
    #[error("{inputs} inputs but {predictions} predictions")]
    LengthMismatch { inputs: usize, predictions: usize },
    #[error(transparent)]
    Triple(#[from] TripleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_error(line: usize, reason: impl Into<String>) -> StoreError {
    StoreError::FormatError {
        line,
        reason: reason.into(),
    }
}

/// Lines of a text source with 1-based numbers, `\n` or `\r\n` terminated.
fn numbered_lines<R: Read>(source: R) -> impl Iterator<Item = Result<(usize, String), StoreError>> {
    BufReader::new(source).lines().enumerate().map(|(i, l)| {
        let mut line = l.map_err(|e| {
            if e.kind() == std::io::ErrorKind::InvalidData {
                format_error(i + 1, "invalid UTF-8")
            } else {
                StoreError::Io(e)
            }
        })?;
        if line.ends_with('\r') {
            line.pop();
        }
        Ok((i + 1, line))
    })
}

fn is_header(line: &str) -> bool {
    line.starts_with('#') && !line.contains('\t')
}

/// Writes `set` in canonical order, preceded by `header` lines (each gets a `# ` prefix).
pub fn write_canonical_with_header<W: Write>(
    set: &TripleSet,
    header: &[String],
    mut sink: W,
) -> Result<(), StoreError> {
    for h in header {
        debug_assert!(!h.contains(['\t', '\n']));
        writeln!(sink, "# {h}")?;
    }
    for t in set.iter() {
        writeln!(sink, "{}\t{}\t{}\t{}", t.lemma, t.tag_string, t.form, t.count)?;
    }
    sink.flush()?;
    Ok(())
}

pub fn write_canonical<W: Write>(set: &TripleSet, sink: W) -> Result<(), StoreError> {
    write_canonical_with_header(set, &[], sink)
}

/// Header lines (without the `# ` prefix) and the triples of a canonical file.
pub fn read_canonical_with_header<R: Read>(
    source: R,
    language: &str,
) -> Result<(Vec<String>, TripleSet), StoreError> {
    let mut header = Vec::new();
    let mut set = TripleSet::new(language);
    for item in numbered_lines(source) {
        let (n, line) = item?;
        if line.is_empty() {
            continue;
        }
        if is_header(&line) {
            header.push(line[1..].trim_start().to_owned());
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(format_error(n, format!("expected 4 columns, found {}", cols.len())));
        }
        let count: u64 = cols[3]
            .parse()
            .map_err(|_| format_error(n, format!("count {:?} is not an integer", cols[3])))?;
        set.add(cols[0], &split_tags(cols[1]), cols[2], count)
            .map_err(|e| format_error(n, e.to_string()))?;
    }
    Ok((header, set))
}

pub fn read_canonical<R: Read>(source: R, language: &str) -> Result<TripleSet, StoreError> {
    read_canonical_with_header(source, language).map(|(_, s)| s)
}

/// Roles of the three columns in a shared-task file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnOrder {
    LemmaFormTags,
    LemmaTagsForm,
}

impl ColumnOrder {
    /// Column indices of (tags, form).
    fn positions(self) -> (usize, usize) {
        match self {
            ColumnOrder::LemmaFormTags => (2, 1),
            ColumnOrder::LemmaTagsForm => (1, 2),
        }
    }
}

impl FromStr for ColumnOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lemma-form-tags" => Ok(ColumnOrder::LemmaFormTags),
            "lemma-tags-form" => Ok(ColumnOrder::LemmaTagsForm),
            other => Err(format!(
                "unknown column order {other:?} (expected lemma-form-tags or lemma-tags-form)"
            )),
        }
    }
}

/// Reads a shared-task file as count-1 triples; repeated lines add up.
pub fn read_sigmorphon<R: Read>(
    source: R,
    order: ColumnOrder,
    language: &str,
) -> Result<TripleSet, StoreError> {
    let (tag_col, form_col) = order.positions();
    let mut set = TripleSet::new(language);
    for item in numbered_lines(source) {
        let (n, line) = item?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(format_error(n, format!("expected 3 columns, found {}", cols.len())));
        }
        set.add(cols[0], &split_tags(cols[tag_col]), cols[form_col], 1)
            .map_err(|e| format_error(n, e.to_string()))?;
    }
    Ok(set)
}

/// Layout of a file handed to prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    /// `lemma\ttags[\tform[\tcount]]`
    Canonical,
    /// Three shared-task columns; a missing form column is allowed.
    Sigmorphon(ColumnOrder),
}

/// One input line to be inflected, remembered verbatim so predictions can
/// be written back in the same layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InflectionQuery {
    pub line: usize,
    pub lemma: String,
    pub tags: Vec<String>,
    pub gold: Option<String>,
    fields: Vec<String>,
    form_col: usize,
}

impl InflectionQuery {
    /// The input line with its form column set to `prediction`.
    pub fn render(&self, prediction: &str) -> String {
        let mut fields = self.fields.clone();
        if fields.len() <= self.form_col {
            fields.resize(self.form_col + 1, String::new());
        }
        fields[self.form_col] = prediction.to_owned();
        fields.join("\t")
    }
}

/// Reads prediction inputs in file order (no merging).
pub fn read_queries<R: Read>(source: R, format: InputFormat) -> Result<Vec<InflectionQuery>, StoreError> {
    let mut out = Vec::new();
    for item in numbered_lines(source) {
        let (n, line) = item?;
        if line.is_empty() || (format == InputFormat::Canonical && is_header(&line)) {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(str::to_owned).collect();
        let (tags, form_col) = match format {
            InputFormat::Canonical => {
                if !(2..=4).contains(&fields.len()) {
                    return Err(format_error(n, format!("expected 2-4 columns, found {}", fields.len())));
                }
                (fields[1].as_str(), 2)
            }
            InputFormat::Sigmorphon(order) => {
                let (tag_col, form_col) = order.positions();
                let expected_short = order == ColumnOrder::LemmaTagsForm && fields.len() == 2;
                if fields.len() != 3 && !expected_short {
                    return Err(format_error(n, format!("expected 3 columns, found {}", fields.len())));
                }
                (fields[tag_col].as_str(), form_col)
            }
        };
        let tags = split_tags(tags);
        validate_tags(&tags).map_err(|e| format_error(n, e.to_string()))?;
        validate_text("lemma", &fields[0]).map_err(|e| format_error(n, e.to_string()))?;
        out.push(InflectionQuery {
            line: n,
            lemma: fields[0].clone(),
            gold: fields.get(form_col).cloned(),
            tags,
            fields,
            form_col,
        });
    }
    Ok(out)
}

/// Writes one line per query with its form column replaced, in input order.
pub fn write_predictions<W: Write, S: AsRef<str>>(
    queries: &[InflectionQuery],
    predictions: &[S],
    mut sink: W,
) -> Result<(), StoreError> {
    if queries.len() != predictions.len() {
        return Err(StoreError::LengthMismatch {
            inputs: queries.len(),
            predictions: predictions.len(),
        });
    }
    for (q, p) in queries.iter().zip(predictions) {
        writeln!(sink, "{}", q.render(p.as_ref()))?;
    }
    sink.flush()?;
    Ok(())
}

/// Renders a single canonical record line (no newline).
pub fn canonical_line(lemma: &str, tags: &[String], form: &str, count: u64) -> String {
    format!("{lemma}\t{}\t{form}\t{count}", join_tags(tags))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(set: &TripleSet) -> TripleSet {
        let mut buf = Vec::new();
        write_canonical(set, &mut buf).unwrap();
        read_canonical(&buf[..], set.language()).unwrap()
    }

    #[test]
    fn canonical_line_for_superlative() {
        let mut set = TripleSet::new("en");
        set.add("well", &["UPOS=ADV", "Degree=Sup"], "best", 2).unwrap();
        let mut buf = Vec::new();
        write_canonical(&set, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "well\tUPOS=ADV;Degree=Sup\tbest\t2\n");
    }

    #[test]
    fn empty_set_roundtrips_through_empty_file() {
        let set = TripleSet::new("xx");
        let mut buf = Vec::new();
        write_canonical(&set, &mut buf).unwrap();
        assert!(buf.is_empty());
        assert_eq!(roundtrip(&set), set);
    }

    #[test]
    fn header_and_hash_lemmas_coexist() {
        let mut set = TripleSet::new("xx");
        set.add("#tag", &["UPOS=SYM"], "#tag", 1).unwrap();
        let mut buf = Vec::new();
        write_canonical_with_header(&set, &["seed=1".to_owned()], &mut buf).unwrap();
        let (header, back) = read_canonical_with_header(&buf[..], "xx").unwrap();
        assert_eq!(header, vec!["seed=1".to_owned()]);
        assert_eq!(back, set);
    }

    #[test]
    fn canonical_format_errors() {
        let bad_cols = "a\tT\tb\n";
        assert!(matches!(
            read_canonical(bad_cols.as_bytes(), "xx"),
            Err(StoreError::FormatError { line: 1, .. })
        ));
        let bad_count = "a\tT\tb\t1\na\tT\tc\tx\n";
        assert!(matches!(
            read_canonical(bad_count.as_bytes(), "xx"),
            Err(StoreError::FormatError { line: 2, .. })
        ));
        assert!(read_canonical("a\tT\tb\t0\n".as_bytes(), "xx").is_err());
        assert!(read_canonical("a\tT\tb\t-1\n".as_bytes(), "xx").is_err());
    }

    #[test]
    fn sigmorphon_presets_swap_roles() {
        let file = "well\tADV;SUP\tbest\n";
        let ltf = read_sigmorphon(file.as_bytes(), ColumnOrder::LemmaTagsForm, "en").unwrap();
        assert_eq!(ltf.count_of("well", &["ADV", "SUP"], "best"), Some(1));
        let lft = read_sigmorphon(file.as_bytes(), ColumnOrder::LemmaFormTags, "en").unwrap();
        let t = lft.iter().next().unwrap();
        assert_eq!(t.lemma, "well");
        assert_eq!(t.form, "ADV;SUP");
        assert_eq!(t.tags(), vec!["best".to_owned()]);
    }

    #[test]
    fn sigmorphon_duplicates_merge_and_bad_lines_fail() {
        let file = "a\tN;SG\tb\na\tN;SG\tb\n";
        let set = read_sigmorphon(file.as_bytes(), ColumnOrder::LemmaTagsForm, "xx").unwrap();
        assert_eq!(set.count_of("a", &["N", "SG"], "b"), Some(2));
        let bad = "a\tN\tb\na\tb\n";
        assert!(matches!(
            read_sigmorphon(bad.as_bytes(), ColumnOrder::LemmaTagsForm, "xx"),
            Err(StoreError::FormatError { line: 2, .. })
        ));
    }

    #[test]
    fn predictions_keep_order_and_layout() {
        let file = "c\tV;PST\tcc\na\tN;PL\taa\nb\tN;SG\tb\n";
        let q = read_queries(file.as_bytes(), InputFormat::Sigmorphon(ColumnOrder::LemmaTagsForm)).unwrap();
        let mut out = Vec::new();
        write_predictions(&q, &["cc", "x", "y"], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "c\tV;PST\tcc\na\tN;PL\tx\nb\tN;SG\ty\n");
        assert!(matches!(
            write_predictions(&q, &["cc", "x"], Vec::new()),
            Err(StoreError::LengthMismatch { inputs: 3, predictions: 2 })
        ));
    }

    #[test]
    fn prediction_equal_to_gold_reproduces_line() {
        let file = "run\tran\tV;PST\n";
        let q = read_queries(file.as_bytes(), InputFormat::Sigmorphon(ColumnOrder::LemmaFormTags)).unwrap();
        assert_eq!(q[0].gold.as_deref(), Some("ran"));
        assert_eq!(format!("{}\n", q[0].render("ran")), file);
    }

    #[test]
    fn canonical_queries_without_forms() {
        let file = "# header\nwell\tUPOS=ADV;Degree=Sup\n";
        let q = read_queries(file.as_bytes(), InputFormat::Canonical).unwrap();
        assert_eq!(q.len(), 1);
        assert_eq!(q[0].gold, None);
        assert_eq!(q[0].render("best"), "well\tUPOS=ADV;Degree=Sup\tbest");
    }
}
