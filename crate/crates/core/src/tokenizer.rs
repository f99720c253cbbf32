//! Word-level vocabulary with a digit-level numeric grammar.
//!
//! Text is lowercased and split on whitespace. ASCII punctuation and ASCII
//! digits always form single-character tokens, so any number embedded in
//! text decomposes into the same symbols the numeric grammar uses.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::table::{parse_decimal, Cell, Column, DataType, Table};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const MASK: TokenId = 2;
pub const CLS: TokenId = 3;
pub const BOS: TokenId = 4;
pub const EOS: TokenId = 5;

pub const SPECIAL_TOKENS: [&str; 6] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[BOS]", "[EOS]"];

/// Symbols of the numeric grammar, in id order after the specials.
pub const NUMERIC_SYMBOLS: [&str; 13] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ".", "-", "e",
];

/// Maximum number of value (and name) tokens kept per cell.
pub const MAX_CELL_TOKENS: usize = 32;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TokenizerError {
    #[error("vocabulary corpus is empty")]
    EmptyCorpus,
    #[error("cannot tokenize non-finite number")]
    NonFinite,
    #[error("token id {0} outside vocabulary")]
    InvalidId(TokenId),
    #[error("vocabulary is malformed: {0}")]
    Malformed(String),
}

/// Token sequence, never empty when produced by the tokenizer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn truncated(mut self, cap: usize) -> Self {
        self.0.truncate(cap);
        self
    }

    /// Copy with a trailing `[EOS]`.
    pub fn with_eos(&self) -> TokenSeq {
        let mut v = self.0.clone();
        v.push(EOS);
        TokenSeq(v)
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSeq(v)
    }
}

/// Splits lowercased text into word, punctuation and digit pieces.
pub fn split_words(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in s.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || ch.is_ascii_digit() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Shortest round-trip decimal rendering. Plain notation for moderate
/// magnitudes, `{:e}` outside `[1e-4, 1e15)`.
pub fn canonical_decimal(x: f64) -> Result<String, TokenizerError> {
    if !x.is_finite() {
        return Err(TokenizerError::NonFinite);
    }
    let a = x.abs();
    if x == 0.0 {
        return Ok("0".into());
    }
    if (1e-4..1e15).contains(&a) {
        Ok(format!("{x}"))
    } else {
        Ok(format!("{x:e}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = TokenizerError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        let base = SPECIAL_TOKENS.len() + NUMERIC_SYMBOLS.len();
        if tokens.len() < base {
            return Err(TokenizerError::Malformed(format!(
                "{} tokens",
                tokens.len()
            )));
        }
        for (i, s) in SPECIAL_TOKENS
            .iter()
            .chain(NUMERIC_SYMBOLS.iter())
            .enumerate()
        {
            if tokens[i] != *s {
                return Err(TokenizerError::Malformed(format!(
                    "id {i} is {:?}, expected {s:?}",
                    tokens[i]
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(TokenizerError::Malformed(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Counts tokens from tables and free text, then freezes a [`Vocabulary`].
#[derive(Default)]
pub struct VocabBuilder {
    counts: HashMap<String, u64>,
    reserved: Vec<String>,
}

impl VocabBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// A builder with the fill-in prompt words already reserved.
    pub fn with_fill_prompt() -> Self {
        let mut b = Self::new();
        b.reserve(FILL_PROMPT_PREFIX);
        b.reserve(":");
        b
    }

    /// Tokens of column names and of every non-numeric value.
    pub fn add_table(&mut self, t: &Table) {
        for c in t.schema() {
            self.add_text(&c.name);
        }
        for row in t.rows() {
            for cell in row {
                if let Cell::Value(v) = cell {
                    if parse_decimal(v).is_none() {
                        self.add_text(v);
                    }
                }
            }
        }
    }

    pub fn add_text(&mut self, s: &str) {
        for w in split_words(s) {
            *self.counts.entry(w).or_default() += 1;
        }
    }

    /// Tokens always included regardless of count (prompt templates, labels).
    pub fn reserve(&mut self, s: &str) {
        for w in split_words(s) {
            if !self.reserved.contains(&w) {
                self.reserved.push(w);
            }
        }
    }

    /// Layout: specials, numeric symbols, reserved tokens in first-seen
    /// order, then counted tokens with `count >= min_count` by descending
    /// frequency and lexicographic tie-break.
    pub fn build(&self, min_count: u64) -> Vocabulary {
        let mut tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .chain(NUMERIC_SYMBOLS.iter())
            .map(|s| s.to_string())
            .collect();
        let push = |tokens: &mut Vec<String>, t: &str| {
            if !tokens.iter().any(|x| x == t) {
                tokens.push(t.to_string());
            }
        };
        for r in &self.reserved {
            push(&mut tokens, r);
        }
        let mut counted: Vec<(&String, &u64)> = self
            .counts
            .iter()
            .filter(|(_, &c)| c >= min_count)
            .collect();
        counted.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        for (t, _) in counted {
            push(&mut tokens, t);
        }
        Vocabulary::try_from(tokens).expect("builder layout is valid")
    }
}

/// Prompt template used for masked-cell prediction.
pub const FILL_PROMPT_PREFIX: &str = "fill in missing value,";

/// Maximum prompt length in tokens.
pub const MAX_PROMPT_TOKENS: usize = 64;

/// One tokenized cell: type indicator, column-name tokens, value tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellTokens {
    pub dtype: DataType,
    pub name: TokenSeq,
    pub value: TokenSeq,
}

/// Vocabulary over the tables of `corpus`.
pub fn build_vocab(corpus: &[Table], min_count: u64) -> Result<Vocabulary, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut b = VocabBuilder::new();
    for t in corpus {
        b.add_table(t);
    }
    Ok(b.build(min_count))
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_numeric_symbol(id: TokenId) -> bool {
        let base = SPECIAL_TOKENS.len() as TokenId;
        (base..base + NUMERIC_SYMBOLS.len() as TokenId).contains(&id)
    }

    pub fn numeric_symbol(&self, sym: char) -> TokenId {
        let pos = NUMERIC_SYMBOLS
            .iter()
            .position(|s| s.starts_with(sym))
            .expect("numeric grammar symbol");
        (SPECIAL_TOKENS.len() + pos) as TokenId
    }

    /// Lowercased word split; unknown words map to `[UNK]`, and text with no
    /// tokens becomes a single `[UNK]`.
    pub fn tokenize_text(&self, s: &str) -> TokenSeq {
        let ids: Vec<TokenId> = split_words(s)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect();
        if ids.is_empty() {
            TokenSeq(vec![UNK])
        } else {
            TokenSeq(ids)
        }
    }

    pub fn tokenize_number(&self, x: f64) -> Result<TokenSeq, TokenizerError> {
        let s = canonical_decimal(x)?;
        Ok(TokenSeq(
            s.chars().map(|c| self.numeric_symbol(c)).collect(),
        ))
    }

    /// `[MASK]` for missing cells, numeric grammar for numerical values,
    /// word tokens otherwise; capped at [`MAX_CELL_TOKENS`].
    pub fn tokenize_cell(&self, cell: &Cell, dtype: DataType) -> TokenSeq {
        let seq = match cell {
            Cell::Missing => TokenSeq(vec![MASK]),
            Cell::Value(v) => match (dtype, parse_decimal(v)) {
                (DataType::Numerical, Some(x)) => {
                    self.tokenize_number(x).expect("parse_decimal is finite")
                }
                _ => self.tokenize_text(v),
            },
        };
        seq.truncated(MAX_CELL_TOKENS)
    }

    pub fn tokenize_name(&self, name: &str) -> TokenSeq {
        self.tokenize_text(name).truncated(MAX_CELL_TOKENS)
    }

    /// Tokenizes the given cells of a row; `cols` indexes `schema`.
    pub fn tokenize_row(&self, schema: &[Column], row: &[Cell], cols: &[usize]) -> Vec<CellTokens> {
        cols.iter()
            .map(|&j| CellTokens {
                dtype: schema[j].dtype,
                name: self.tokenize_name(&schema[j].name),
                value: self.tokenize_cell(&row[j], schema[j].dtype),
            })
            .collect()
    }

    /// `fill in missing value, <column name> :`
    pub fn fill_prompt(&self, column: &str) -> TokenSeq {
        self.tokenize_text(&format!("{FILL_PROMPT_PREFIX} {column} :"))
            .truncated(MAX_PROMPT_TOKENS)
    }

    /// Free-form task prompt.
    pub fn task_prompt(&self, text: &str) -> TokenSeq {
        self.tokenize_text(text).truncated(MAX_PROMPT_TOKENS)
    }

    /// Text for `ids` up to the first `[EOS]`. Runs of numeric symbols are
    /// joined without spaces; everything else is space-separated.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        let mut prev_numeric = false;
        let mut first = true;
        for &id in ids {
            if id == EOS {
                break;
            }
            let tok = self.token(id).ok_or(TokenizerError::InvalidId(id))?;
            let numeric = Self::is_numeric_symbol(id);
            if !first && !(numeric && prev_numeric) {
                out.push(' ');
            }
            out.push_str(tok);
            prev_numeric = numeric;
            first = false;
        }
        Ok(out)
    }
}
