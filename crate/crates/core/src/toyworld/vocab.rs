use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::ToyError;

/// Position of a token in the closed vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub const PAD: TokenId = TokenId(0);
pub const BOS: TokenId = TokenId(1);
pub const EOS: TokenId = TokenId(2);
pub const DETECT: TokenId = TokenId(3);
pub const CAPTION: TokenId = TokenId(4);
pub const REASON: TokenId = TokenId(5);
pub const STOP: TokenId = TokenId(6);

/// Normative token order; ids are positions in this list.
const TOKENS: [&str; 31] = [
    "<pad>",
    "<bos>",
    "<eos>",
    "<detect>",
    "<caption>",
    "<reason>",
    "<stop>",
    "artifact",
    "structure",
    "physics",
    "distortion",
    "quadrant",
    "top_left",
    "top_right",
    "bottom_left",
    "bottom_right",
    "magnitude",
    "low",
    "high",
    "image",
    "normal",
    "real",
    "fake",
    "clean",
    "pattern",
    "none",
    "observed",
    "detect",
    "this",
    "please",
    "repair",
];

/// Closed token vocabulary. It never grows at runtime.
pub struct Vocab {
    ids: HashMap<&'static str, TokenId>,
}

impl fmt::Debug for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocab").field("len", &TOKENS.len()).finish()
    }
}

pub fn vocab() -> &'static Vocab {
    static VOCAB: OnceLock<Vocab> = OnceLock::new();
    VOCAB.get_or_init(|| Vocab {
        ids: TOKENS
            .iter()
            .enumerate()
            .map(|(i, t)| (*t, TokenId(i as u32)))
            .collect(),
    })
}

impl Vocab {
    pub fn len(&self) -> usize {
        TOKENS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &'static [&'static str] {
        &TOKENS
    }

    pub fn id(&self, token: &str) -> Result<TokenId, ToyError> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| ToyError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Result<&'static str, ToyError> {
        TOKENS.get(id.index()).copied().ok_or(ToyError::UnknownId(id.0))
    }

    /// Whitespace tokenization against the closed vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ToyError> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, ToyError> {
        let words: Result<Vec<&str>, ToyError> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }

    /// `vocab.json` body: a token→id object in normative order.
    pub fn to_json(&self) -> String {
        let body: Vec<String> = TOKENS
            .iter()
            .enumerate()
            .map(|(i, t)| format!("  {}: {i}", serde_json::to_string(t).expect("string")))
            .collect();
        format!("{{\n{}\n}}\n", body.join(",\n"))
    }
}
