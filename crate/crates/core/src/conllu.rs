//! CoNLL-U reading and triple extraction.
//!
//! Only the columns needed for inflection data are interpreted (ID, FORM,
//! LEMMA, UPOS, FEATS); the rest are kept verbatim.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Read;

use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::triples::{Provenance, TripleSet};

#[derive(Debug, Error)]
pub enum ConlluError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("invalid UTF-8 at line {line}")]
    EncodingError { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn malformed(line: usize, reason: impl Into<String>) -> ConlluError {
    ConlluError::MalformedLine {
        line,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenId {
    Word(u32),
    /// Multiword token covering words `a..=b`.
    Range(u32, u32),
    /// Empty node `a.b`.
    Empty(u32, u32),
}

impl TokenId {
    fn parse(text: &str) -> Option<TokenId> {
        if let Some((a, b)) = text.split_once('-') {
            let (a, b) = (a.parse().ok()?, b.parse().ok()?);
            return (a >= 1 && a < b).then_some(TokenId::Range(a, b));
        }
        if let Some((a, b)) = text.split_once('.') {
            return Some(TokenId::Empty(a.parse().ok()?, b.parse().ok()?));
        }
        let n: u32 = text.parse().ok()?;
        (n >= 1).then_some(TokenId::Word(n))
    }

    pub fn is_word(&self) -> bool {
        matches!(self, TokenId::Word(_))
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenId::Word(n) => write!(f, "{n}"),
            TokenId::Range(a, b) => write!(f, "{a}-{b}"),
            TokenId::Empty(a, b) => write!(f, "{a}.{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConlluToken {
    pub id: TokenId,
    pub form: String,
    pub lemma: String,
    pub upos: String,
    pub xpos: String,
    /// `(key, value)` pairs sorted by key.
    pub feats: Vec<(String, String)>,
    pub head: String,
    pub deprel: String,
    pub deps: String,
    pub misc: String,
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sentence {
    pub comments: Vec<String>,
    pub tokens: Vec<ConlluToken>,
}

fn parse_feats(text: &str, line: usize) -> Result<Vec<(String, String)>, ConlluError> {
    if text == "_" {
        return Ok(Vec::new());
    }
    let mut feats = Vec::new();
    for pair in text.split('|') {
        let (k, v) = pair
            .split_once('=')
            .filter(|(k, v)| !k.is_empty() && !v.is_empty())
            .ok_or_else(|| malformed(line, format!("bad FEATS pair {pair:?}")))?;
        feats.push((k.to_owned(), v.to_owned()));
    }
    feats.sort();
    if feats.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(malformed(line, "duplicate FEATS key"));
    }
    Ok(feats)
}

fn parse_token(text: &str, line: usize) -> Result<ConlluToken, ConlluError> {
    let cols: Vec<&str> = text.split('\t').collect();
    if cols.len() != 10 {
        return Err(malformed(
            line,
            format!("expected 10 columns, found {}", cols.len()),
        ));
    }
    let id = TokenId::parse(cols[0]).ok_or_else(|| malformed(line, format!("bad ID {:?}", cols[0])))?;
    Ok(ConlluToken {
        id,
        form: cols[1].to_owned(),
        lemma: cols[2].to_owned(),
        upos: cols[3].to_owned(),
        xpos: cols[4].to_owned(),
        feats: parse_feats(cols[5], line)?,
        head: cols[6].to_owned(),
        deprel: cols[7].to_owned(),
        deps: cols[8].to_owned(),
        misc: cols[9].to_owned(),
        line,
    })
}

/// Parses a whole CoNLL-U stream. LF and CRLF line endings are accepted.
pub fn parse_conllu<R: Read>(mut reader: R) -> Result<Vec<Sentence>, ConlluError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| ConlluError::EncodingError {
        line: bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1,
    })?;
    parse_conllu_str(text)
}

pub fn parse_conllu_str(text: &str) -> Result<Vec<Sentence>, ConlluError> {
    let mut sentences = Vec::new();
    let mut current = Sentence::default();
    for (idx, raw) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            if !current.tokens.is_empty() || !current.comments.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
        } else if let Some(comment) = line.strip_prefix('#') {
            current.comments.push(comment.trim_start().to_owned());
        } else {
            current.tokens.push(parse_token(line, line_no)?);
        }
    }
    if !current.tokens.is_empty() || !current.comments.is_empty() {
        sentences.push(current);
    }
    Ok(sentences)
}

/// Filters applied while turning tokens into triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractOptions {
    /// Drop tokens whose lemma or form is `_`.
    pub skip_underscore: bool,
    /// UPOS values to drop (empty keeps everything).
    pub skip_upos: BTreeSet<String>,
    pub lowercase: bool,
    /// Apply Unicode NFC to lemma and form.
    pub nfc: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            skip_underscore: true,
            skip_upos: BTreeSet::new(),
            lowercase: false,
            nfc: false,
        }
    }
}

impl ExtractOptions {
    pub fn describe(&self) -> String {
        let skip: Vec<&str> = self.skip_upos.iter().map(String::as_str).collect();
        format!(
            "skip_underscore={};skip_upos={};lowercase={};nfc={}",
            self.skip_underscore,
            skip.join(","),
            self.lowercase,
            self.nfc
        )
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.describe().as_bytes()))
    }

    /// Whether a token contributes a triple under these options.
    pub fn accepts(&self, token: &ConlluToken) -> bool {
        token.id.is_word()
            && !(self.skip_underscore && (token.lemma == "_" || token.form == "_"))
            && !self.skip_upos.contains(&token.upos)
    }

    fn normalize(&self, s: &str) -> String {
        let s = if self.nfc { s.nfc().collect() } else { s.to_owned() };
        if self.lowercase {
            s.to_lowercase()
        } else {
            s
        }
    }
}

/// Tag tokens of a word: `UPOS=<upos>` then the FEATS pairs in key order.
pub fn token_tags(token: &ConlluToken) -> Vec<String> {
    std::iter::once(format!("UPOS={}", token.upos))
        .chain(token.feats.iter().map(|(k, v)| format!("{k}={v}")))
        .collect()
}

/// Collects unique `(lemma, tags, form)` triples with occurrence counts.
pub fn extract_triples(
    sentences: &[Sentence],
    language: &str,
    options: &ExtractOptions,
) -> TripleSet {
    let mut set = TripleSet::new(language);
    for token in sentences.iter().flat_map(|s| &s.tokens) {
        if !options.accepts(token) {
            continue;
        }
        let tags = token_tags(token).join(";");
        set.add_raw(
            &options.normalize(&token.lemma),
            &tags,
            &options.normalize(&token.form),
            1,
        );
    }
    set.provenance = Some(Provenance {
        source: String::new(),
        options_digest: options.digest(),
    });
    set
}

#[cfg(test)]
mod tests {
    use super::*;

    const WELL: &str = "1\twell\twell\tADV\t_\tDegree=Pos\t0\troot\t_\t_";

    #[test]
    fn parses_plain_token() {
        let s = parse_conllu_str(WELL).unwrap();
        let t = &s[0].tokens[0];
        assert_eq!(t.id, TokenId::Word(1));
        assert_eq!(t.lemma, "well");
        assert_eq!(t.upos, "ADV");
        assert_eq!(t.feats, vec![("Degree".into(), "Pos".into())]);
    }

    #[test]
    fn range_line_is_flagged_and_yields_nothing() {
        let text = "3-4\tdu\t_\t_\t_\t_\t_\t_\t_\t_\n3\tde\tde\tADP\t_\t_\t_\t_\t_\t_\n";
        let s = parse_conllu_str(text).unwrap();
        assert_eq!(s[0].tokens[0].id, TokenId::Range(3, 4));
        let opts = ExtractOptions {
            skip_underscore: false,
            ..Default::default()
        };
        let set = extract_triples(&s, "fr", &opts);
        assert_eq!(set.len(), 1);
        assert_eq!(set.iter().next().unwrap().lemma, "de");
    }

    #[test]
    fn empty_node_is_skipped() {
        let text = "1\ta\ta\tX\t_\t_\t0\troot\t_\t_\n1.1\tb\tb\tX\t_\t_\t_\t_\t_\t_\n";
        let s = parse_conllu_str(text).unwrap();
        assert_eq!(s[0].tokens[1].id, TokenId::Empty(1, 1));
        assert_eq!(extract_triples(&s, "xx", &ExtractOptions::default()).len(), 1);
    }

    #[test]
    fn nine_columns_is_malformed_with_line_number() {
        let text = format!("# c\n{WELL}\n1\ta\tb\tc\td\te\tf\tg\th\n");
        match parse_conllu_str(&text) {
            Err(ConlluError::MalformedLine { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_ids_and_feats_are_malformed() {
        for bad in [
            "4-3\ta\ta\tX\t_\t_\t_\t_\t_\t_",
            "0\ta\ta\tX\t_\t_\t_\t_\t_\t_",
            "x\ta\ta\tX\t_\t_\t_\t_\t_\t_",
            "1\ta\ta\tX\t_\tCase\t_\t_\t_\t_",
            "1\ta\ta\tX\t_\tA=1|A=2\t_\t_\t_\t_",
        ] {
            assert!(parse_conllu_str(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn invalid_utf8_reports_encoding_error() {
        let bytes = b"1\ta\ta\tX\t_\t_\t_\t_\t_\t_\n1\t\xff\ta\tX\t_\t_\t_\t_\t_\t_\n";
        match parse_conllu(&bytes[..]) {
            Err(ConlluError::EncodingError { line }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn crlf_and_sentence_boundaries() {
        let text = "# sent_id = 1\r\n1\ta\ta\tX\t_\t_\t0\troot\t_\t_\r\n\r\n1\tb\tb\tX\t_\t_\t0\troot\t_\t_\r\n";
        let s = parse_conllu_str(text).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].comments, vec!["sent_id = 1".to_owned()]);
        assert_eq!(s[1].tokens[0].misc, "_");
    }

    #[test]
    fn feats_are_sorted_into_tags() {
        let text = "1\tbest\twell\tADV\t_\tDegree=Sup|Abbr=No\t0\troot\t_\t_";
        let s = parse_conllu_str(text).unwrap();
        assert_eq!(
            token_tags(&s[0].tokens[0]),
            vec!["UPOS=ADV", "Abbr=No", "Degree=Sup"]
        );
    }

    #[test]
    fn duplicate_occurrences_merge() {
        let line = "1\tbest\twell\tADV\t_\tDegree=Sup\t0\troot\t_\t_";
        let text = format!("{line}\n\n{line}\n");
        let set = extract_triples(&parse_conllu_str(&text).unwrap(), "en", &Default::default());
        assert_eq!(set.count_of("well", &["UPOS=ADV", "Degree=Sup"], "best"), Some(2));
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn underscore_lemma_contributes_nothing() {
        let text = "1\tfoo\t_\tNOUN\t_\t_\t0\troot\t_\t_";
        let set = extract_triples(&parse_conllu_str(text).unwrap(), "xx", &Default::default());
        assert!(set.is_empty());
    }

    #[test]
    fn upos_filter_and_case_options() {
        let text = "1\tDogs\tDog\tNOUN\t_\tNumber=Plur\t0\troot\t_\t_\n2\t.\t.\tPUNCT\t_\t_\t1\tpunct\t_\t_";
        let sents = parse_conllu_str(text).unwrap();
        let opts = ExtractOptions {
            skip_upos: ["PUNCT".to_owned()].into(),
            lowercase: true,
            ..Default::default()
        };
        let set = extract_triples(&sents, "en", &opts);
        assert_eq!(set.len(), 1);
        assert_eq!(set.count_of("dog", &["UPOS=NOUN", "Number=Plur"], "dogs"), Some(1));
        assert_ne!(opts.digest(), ExtractOptions::default().digest());
    }

    #[test]
    fn nfc_switch_composes() {
        let text = "1\te\u{0301}\te\u{0301}\tX\t_\t_\t0\troot\t_\t_";
        let sents = parse_conllu_str(text).unwrap();
        let raw = extract_triples(&sents, "xx", &Default::default());
        assert_eq!(raw.iter().next().unwrap().form, "e\u{0301}");
        let opts = ExtractOptions { nfc: true, ..Default::default() };
        let composed = extract_triples(&sents, "xx", &opts);
        assert_eq!(composed.iter().next().unwrap().form, "\u{e9}");
    }
}
