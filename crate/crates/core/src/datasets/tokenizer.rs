use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Token;

pub const PAD: Token = 0;
pub const EOS: Token = 1;
/// Label sentinel for positions excluded from supervision.
pub const IGNORE: Token = Token::MAX;

const PAD_SYMBOL: &str = "<pad>";
const EOS_SYMBOL: &str = "<eos>";

/// Every character the built-in tasks can emit.
pub const CHAR_ALPHABET: &str = "0123456789+-*/=;:?|>.,() abcdefghijklmnopqrstuvwxyzABCDEFGHIJK";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    Char,
    Word,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    mode: TokenizerMode,
    symbols: Vec<String>,
    index: HashMap<String, Token>,
}

impl Tokenizer {
    fn from_symbols(mode: TokenizerMode, symbols: impl IntoIterator<Item = String>) -> Self {
        let mut all = vec![PAD_SYMBOL.to_string(), EOS_SYMBOL.to_string()];
        for s in symbols {
            if !all.contains(&s) {
                all.push(s);
            }
        }
        let index = all
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as Token))
            .collect();
        Tokenizer {
            mode,
            symbols: all,
            index,
        }
    }

    /// Character tokenizer over [`CHAR_ALPHABET`] (64 ids with specials).
    pub fn char_default() -> Self {
        Self::chars(CHAR_ALPHABET)
    }

    pub fn chars(alphabet: &str) -> Self {
        Self::from_symbols(TokenizerMode::Char, alphabet.chars().map(String::from))
    }

    /// Word tokenizer over the whitespace-separated words of `texts`,
    /// in first-seen order.
    pub fn fit_words<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: Vec<String> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .map(String::from)
            .collect();
        Self::from_symbols(TokenizerMode::Word, words)
    }

    pub fn for_mode(mode: TokenizerMode) -> Self {
        match mode {
            TokenizerMode::Char => Self::char_default(),
            TokenizerMode::Word => Self::fit_words([]),
        }
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: Token) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<Token> {
        self.index.get(symbol).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<Token>> {
        let lookup = |s: &str| self.id(s).ok_or_else(|| Error::OutOfVocab(s.to_string()));
        match self.mode {
            TokenizerMode::Char => {
                let mut buf = [0u8; 4];
                text.chars()
                    .map(|c| lookup(c.encode_utf8(&mut buf)))
                    .collect()
            }
            TokenizerMode::Word => text.split_whitespace().map(lookup).collect(),
        }
    }

    /// Decodes ids to text, dropping padding and stopping at nothing.
    /// Special ids render as their bracketed names.
    pub fn decode(&self, ids: &[Token]) -> String {
        let parts = ids
            .iter()
            .filter(|&&t| t != PAD)
            .map(|&t| self.symbol(t).unwrap_or("<unk>"));
        match self.mode {
            TokenizerMode::Char => parts.collect(),
            TokenizerMode::Word => parts.collect::<Vec<_>>().join(" "),
        }
    }

    /// Decodes ids up to the first end-of-sequence token.
    pub fn decode_text(&self, ids: &[Token]) -> String {
        let end = ids.iter().position(|&t| t == EOS).unwrap_or(ids.len());
        self.decode(&ids[..end])
    }
}
