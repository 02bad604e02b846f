use std::collections::{BTreeSet, HashMap};
use std::fmt;

use sha2::{Digest, Sha256};

use super::SamplerError;
use crate::triples::TripleSet;

const VOCAB_HEADER: &str = "#inflect-vocab v1 specials=PAD:0,BOS:1,EOS:2,UNK:3";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    Unk,
    Char(char),
    Tag(String),
    Lang(String),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Pad => f.write_str("<pad>"),
            Token::Bos => f.write_str("<bos>"),
            Token::Eos => f.write_str("<eos>"),
            Token::Unk => f.write_str("<unk>"),
            Token::Char(c) => write!(f, "{c}"),
            Token::Tag(t) => f.write_str(t),
            Token::Lang(l) => write!(f, "<LANG:{l}>"),
        }
    }
}

/// Token/id bijection: specials, then characters, tag tokens and language ids,
/// each block sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Token>,
    index: HashMap<Token, u32>,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const UNK: u32 = 3;

    fn from_tokens(tokens: Vec<Token>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    /// Builds the vocabulary from training sets only.
    pub fn build(train: &[&TripleSet]) -> Result<Self, SamplerError> {
        if train.iter().all(|s| s.is_empty()) {
            return Err(SamplerError::EmptyTrain);
        }
        let mut chars = BTreeSet::new();
        let mut tags = BTreeSet::new();
        let mut langs = BTreeSet::new();
        for set in train {
            if set.is_empty() {
                continue;
            }
            langs.insert(set.language().to_owned());
            for t in set.iter() {
                chars.extend(t.lemma.chars());
                chars.extend(t.form.chars());
                tags.extend(t.tags());
            }
        }
        let mut tokens = vec![Token::Pad, Token::Bos, Token::Eos, Token::Unk];
        tokens.extend(chars.into_iter().map(Token::Char));
        tokens.extend(tags.into_iter().map(Token::Tag));
        tokens.extend(langs.into_iter().map(Token::Lang));
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&Token> {
        self.tokens.get(id as usize)
    }

    pub fn id(&self, token: &Token) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn char_id(&self, c: char) -> u32 {
        self.id(&Token::Char(c)).unwrap_or(Self::UNK)
    }

    pub fn tag_id(&self, tag: &str) -> u32 {
        self.id(&Token::Tag(tag.to_owned())).unwrap_or(Self::UNK)
    }

    pub fn lang_id(&self, language: &str) -> Option<u32> {
        self.id(&Token::Lang(language.to_owned()))
    }

    pub fn languages(&self) -> Vec<&str> {
        self.tokens
            .iter()
            .filter_map(|t| match t {
                Token::Lang(l) => Some(l.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Ids that may appear in a generated form: characters and EOS.
    pub fn output_allowed(&self, id: u32) -> bool {
        matches!(self.token(id), Some(Token::Char(_) | Token::Eos))
    }

    /// Text form: a header line, then one `kind\tvalue` line per id.
    pub fn to_text(&self) -> String {
        let mut out = String::from(VOCAB_HEADER);
        out.push('\n');
        for t in &self.tokens {
            let line = match t {
                Token::Pad => "special\tPAD".to_owned(),
                Token::Bos => "special\tBOS".to_owned(),
                Token::Eos => "special\tEOS".to_owned(),
                Token::Unk => "special\tUNK".to_owned(),
                Token::Char(c) => format!("char\t{c}"),
                Token::Tag(s) => format!("tag\t{s}"),
                Token::Lang(s) => format!("lang\t{s}"),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, SamplerError> {
        let mut lines = text.split('\n');
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(SamplerError::BadVocab("missing or unsupported header".into()));
        }
        let mut tokens = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = || SamplerError::BadVocab(format!("line {}: {line:?}", i + 2));
            let (kind, value) = line.split_once('\t').ok_or_else(bad)?;
            let token = match (kind, value) {
                ("special", "PAD") => Token::Pad,
                ("special", "BOS") => Token::Bos,
                ("special", "EOS") => Token::Eos,
                ("special", "UNK") => Token::Unk,
                ("char", v) => {
                    let mut it = v.chars();
                    match (it.next(), it.next()) {
                        (Some(c), None) => Token::Char(c),
                        _ => return Err(bad()),
                    }
                }
                ("tag", v) => Token::Tag(v.to_owned()),
                ("lang", v) => Token::Lang(v.to_owned()),
                _ => return Err(bad()),
            };
            tokens.push(token);
        }
        if tokens.get(..4) != Some(&[Token::Pad, Token::Bos, Token::Eos, Token::Unk][..]) {
            return Err(SamplerError::BadVocab("specials out of place".into()));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(SamplerError::BadVocab("duplicate token".into()));
        }
        Ok(vocab)
    }

    /// SHA-256 of the text form; ties checkpoints to the vocabulary.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}
