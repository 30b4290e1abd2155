//! Text ingestion: vocabularies, token sequences and evaluation windows.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::crc64;

/// Id of the unknown-token symbol in every vocabulary.
pub const UNK_ID: u32 = 0;
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    Char,
    Word,
}

impl TokenMode {
    fn tag(self) -> u8 {
        match self {
            TokenMode::Char => 1,
            TokenMode::Word => 2,
        }
    }
}

/// Splits text into surface tokens. Word mode keeps every non-alphanumeric
/// character (including whitespace) as its own token so that concatenating
/// the pieces restores the input exactly.
pub fn split_tokens(text: &str, mode: TokenMode) -> Vec<&str> {
    match mode {
        TokenMode::Char => text
            .char_indices()
            .map(|(i, c)| &text[i..i + c.len_utf8()])
            .collect(),
        TokenMode::Word => {
            let mut out = Vec::new();
            let mut word_start: Option<usize> = None;
            for (i, c) in text.char_indices() {
                if c.is_alphanumeric() {
                    word_start.get_or_insert(i);
                    continue;
                }
                if let Some(s) = word_start.take() {
                    out.push(&text[s..i]);
                }
                out.push(&text[i..i + c.len_utf8()]);
            }
            if let Some(s) = word_start {
                out.push(&text[s..]);
            }
            out
        }
    }
}

/// Dense token-id assignment. Id 0 is always [`UNK_TOKEN`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    mode: TokenMode,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    mode: TokenMode,
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        Vocabulary::from_tokens(f.mode, f.tokens)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            mode: v.mode,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from raw text. Tokens are ordered by descending
    /// frequency, ties broken by first occurrence, and truncated so that the
    /// vocabulary (including the unknown symbol) holds at most `max_size`
    /// entries.
    pub fn build(text: &str, mode: TokenMode, max_size: usize) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if max_size < 1 {
            return Err(invalid("max_size must be at least 1"));
        }
        // token -> (count, first occurrence)
        let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
        for (pos, tok) in split_tokens(text, mode).into_iter().enumerate() {
            stats.entry(tok).or_insert((0, pos)).0 += 1;
        }
        let mut ranked: Vec<(&str, usize, usize)> =
            stats.into_iter().map(|(t, (n, first))| (t, n, first)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size - 1);

        let tokens = std::iter::once(UNK_TOKEN.to_string())
            .chain(ranked.into_iter().map(|(t, _, _)| t.to_string()))
            .collect();
        Self::from_tokens(mode, tokens)
    }

    pub fn from_tokens(mode: TokenMode, tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(invalid("vocabulary must start with the unknown token"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            mode,
            tokens,
            index,
        })
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Out-of-vocabulary tokens map to [`UNK_ID`].
    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_tokens(text, self.mode)
            .into_iter()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect()
    }

    /// Content hash identifying this exact token assignment.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = vec![self.mode.tag()];
        for t in &self.tokens {
            bytes.extend_from_slice(t.as_bytes());
            bytes.push(0);
        }
        crc64(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        crate::io::write_file(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Source {
    pub corpus: String,
    pub split: Split,
}

impl Source {
    pub fn new(corpus: impl Into<String>, split: Split) -> Self {
        Source {
            corpus: corpus.into(),
            split,
        }
    }

    /// Stable numeric id used in datastore provenance records.
    pub fn id(&self) -> u64 {
        crc64(format!("{}/{}", self.corpus, self.split).as_bytes())
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.corpus, self.split)
    }
}

/// Encoded text with its provenance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub source: Source,
}

impl TokenSeq {
    pub fn encode(text: &str, vocab: &Vocabulary, source: Source) -> Self {
        TokenSeq {
            ids: vocab.encode(text),
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            Some(id) => Err(invalid(format!(
                "token id {id} out of range for vocabulary of size {vocab_size}"
            ))),
            None => Ok(()),
        }
    }

    /// Content hash over ids and provenance.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::io::Hasher::new();
        h.update(&self.source.id().to_le_bytes());
        for id in &self.ids {
            h.update(&id.to_le_bytes());
        }
        h.finish()
    }
}

/// A contiguous span of a sequence fed to a model in one pass.
///
/// Token `start + i` for `i in score_offset..len` is scored, each predicted
/// from the in-window tokens before it. The model input is therefore the
/// first `len - 1` tokens of the span.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    pub score_offset: usize,
}

impl Window {
    /// Model input ids for this window.
    pub fn inputs<'a>(&self, ids: &'a [u32]) -> &'a [u32] {
        &ids[self.start..self.start + self.len - 1]
    }

    /// Absolute positions of scored tokens.
    pub fn scored_positions(&self) -> std::ops::Range<usize> {
        self.start + self.score_offset..self.start + self.len
    }

    /// First model-output row that is scored.
    pub fn first_scored_row(&self) -> usize {
        self.score_offset - 1
    }
}

/// Tiles a sequence of `len` tokens with windows of `context_len` tokens.
///
/// The first window scores every prediction it contains; later windows
/// advance by `score_len` and score only their trailing tokens. Every position
/// in `1..len` is scored exactly once.
pub fn make_windows(len: usize, context_len: usize, score_len: usize) -> Result<Vec<Window>> {
    if score_len == 0 || context_len <= score_len {
        return Err(invalid(format!(
            "need context_len > score_len > 0, got {context_len} and {score_len}"
        )));
    }
    if len < 2 {
        return Ok(Vec::new());
    }
    if len <= context_len {
        return Ok(vec![Window {
            start: 0,
            len,
            score_offset: 1,
        }]);
    }
    let mut windows = vec![Window {
        start: 0,
        len: context_len,
        score_offset: 1,
    }];
    let mut scored_end = context_len;
    while scored_end < len {
        let fresh = score_len.min(len - scored_end);
        let end = scored_end + fresh;
        windows.push(Window {
            start: end - context_len,
            len: context_len,
            score_offset: context_len - fresh,
        });
        scored_end = end;
    }
    Ok(windows)
}
