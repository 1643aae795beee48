//! Word-level tokenizer over a fixed vocabulary, plus entity-mention
//! localization inside continuations.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// A sequence of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }

    /// `self ⧺ other`
    pub fn concat(&self, other: &[TokenId]) -> TokenSeq {
        let mut v = Vec::with_capacity(self.0.len() + other.len());
        v.extend_from_slice(&self.0);
        v.extend_from_slice(other);
        TokenSeq(v)
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

impl From<&[TokenId]> for TokenSeq {
    fn from(v: &[TokenId]) -> Self {
        Self(v.to_vec())
    }
}

/// Bijective mapping between token strings and ids `0..size`. The four
/// special tokens always occupy ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub const PAD_ID: TokenId = 0;
    pub const BOS_ID: TokenId = 1;
    pub const EOS_ID: TokenId = 2;
    pub const UNK_ID: TokenId = 3;
    const SPECIALS: [&'static str; 4] = [PAD, BOS, EOS, UNK];

    /// Builds a vocabulary from an ordered token list. Specials are inserted
    /// first if absent; duplicates are rejected.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out = Vec::new();
        for s in Self::SPECIALS {
            out.push(s.to_string());
        }
        for t in tokens {
            let t = t.into();
            if Self::SPECIALS.contains(&t.as_str()) {
                continue;
            }
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("invalid token {t:?}")));
            }
            out.push(t);
        }
        let mut index = HashMap::with_capacity(out.len());
        for (i, t) in out.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens: out, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        encode(text, self)
    }

    pub fn decode(&self, seq: &[TokenId]) -> String {
        decode(seq, self)
    }

    /// One token per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_file_string().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 4 || lines[..4] != Self::SPECIALS {
            return Err(Error::InvalidArgument(format!(
                "{}: vocabulary file must start with the special tokens",
                path.display()
            )));
        }
        Self::from_tokens(lines[4..].iter().copied())
    }
}

/// Most frequent whitespace-delimited tokens up to `max_size` entries
/// (specials included). Ties break lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocabulary> {
    if corpus.is_empty() || corpus.iter().all(|s| s.as_ref().split_whitespace().next().is_none()) {
        return Err(Error::EmptyCorpus);
    }
    if max_size < Vocabulary::SPECIALS.len() {
        return Err(Error::InvalidArgument(format!("max_size {max_size} cannot hold the special tokens")));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            if !Vocabulary::SPECIALS.contains(&w) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - Vocabulary::SPECIALS.len());
    Vocabulary::from_tokens(ranked.into_iter().map(|(w, _)| w))
}

/// Unknown words map to `<unk>`.
pub fn encode(text: &str, v: &Vocabulary) -> TokenSeq {
    TokenSeq(
        text.split_whitespace()
            .map(|w| v.id(w).unwrap_or(Vocabulary::UNK_ID))
            .collect(),
    )
}

pub fn decode(seq: &[TokenId], v: &Vocabulary) -> String {
    let mut out = String::new();
    for (i, &id) in seq.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(v.token(id).unwrap_or(UNK));
    }
    out
}

/// 1-based index of the last token of the first occurrence of `entity` in
/// `cont`. Positions `ell+1..=cont.len()` are the ones after the mention.
pub fn find_entity_end(cont: &[TokenId], entity: &[TokenId]) -> Result<usize> {
    if entity.is_empty() {
        return Err(Error::EmptyInput("entity"));
    }
    find_subsequence(cont, entity)
        .map(|start| start + entity.len())
        .ok_or(Error::EntityNotFound)
}

/// 0-based start of the first occurrence of `needle` in `hay`.
pub fn find_subsequence(hay: &[TokenId], needle: &[TokenId]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    hay.windows(needle.len()).position(|w| w == needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::from_tokens(words.iter().copied()).unwrap()
    }

    #[test]
    fn small_corpus_contains_words_and_specials() {
        let v = build_vocab(&["a b a"], 10).unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.id(BOS), Some(Vocabulary::BOS_ID));
    }

    #[test]
    fn truncates_to_max_size() {
        let corpus: Vec<String> = (0..600).map(|i| format!("w{i}")).collect();
        let v = build_vocab(&[corpus.join(" ")], 512).unwrap();
        assert_eq!(v.size(), 512);
        let missing = (0..600).map(|i| format!("w{i}")).find(|w| !v.contains(w)).unwrap();
        assert_eq!(v.encode(&missing).ids(), &[Vocabulary::UNK_ID]);
    }

    #[test]
    fn vocab_is_deterministic() {
        let corpus = ["z y x y", "x q z z"];
        let a = build_vocab(&corpus, 100).unwrap().to_file_string();
        let b = build_vocab(&corpus, 100).unwrap().to_file_string();
        assert_eq!(a, b);
        // z:3, x:2, y:2, q:1 -- the x/y tie goes lexicographically
        assert_eq!(a, "<pad>\n<bos>\n<eos>\n<unk>\nz\nx\ny\nq\n");
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(build_vocab(&empty, 10), Err(Error::EmptyCorpus)));
        assert!(matches!(build_vocab(&["   "], 10), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn encode_empty_and_round_trip() {
        let v = vocab(&["the", "cat", "sat"]);
        assert!(encode("", &v).is_empty());
        let s = "the cat sat";
        assert_eq!(decode(&encode(s, &v), &v), s);
    }

    #[test]
    fn oov_position_decodes_to_unk() {
        let v = vocab(&["the", "sat"]);
        let seq = encode("the cat sat", &v);
        assert_eq!(seq.ids()[1], Vocabulary::UNK_ID);
        assert_eq!(v.token(seq.ids()[1]), Some(UNK));
        assert_eq!(decode(&seq, &v), "the <unk> sat");
    }

    #[test]
    fn entity_end_single_token_at_start() {
        let v = vocab(&["ChatGPT", "can", "respond"]);
        let c = v.encode("ChatGPT can respond");
        let e = v.encode("ChatGPT");
        assert_eq!(find_entity_end(&c, &e).unwrap(), 1);
    }

    #[test]
    fn entity_end_multi_token() {
        let v = vocab(&["the", "Padma", "Bridge", "opened"]);
        let c = v.encode("the Padma Bridge opened");
        let e = v.encode("Padma Bridge");
        assert_eq!(find_entity_end(&c, &e).unwrap(), 3);
    }

    #[test]
    fn entity_end_whole_continuation() {
        let c = [7, 8, 9];
        assert_eq!(find_entity_end(&c, &c).unwrap(), 3);
    }

    #[test]
    fn entity_absent() {
        assert!(matches!(find_entity_end(&[1, 2, 3], &[4]), Err(Error::EntityNotFound)));
        assert!(matches!(find_entity_end(&[1, 2], &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(&["b a c a"], 50).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }
}
