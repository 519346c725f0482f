use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<a>";
pub const PAD: &str = "<pad>";

/// Token inventory with the four reserved ids every backend relies on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    bos: TokenId,
    eos: TokenId,
    sep: TokenId,
    pad: TokenId,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    bos: String,
    eos: String,
    sep: String,
    pad: String,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;
    fn try_from(f: VocabFile) -> Result<Self> {
        Vocabulary::new(f.tokens, &f.bos, &f.eos, &f.sep, &f.pad)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            bos: v.tokens[v.bos as usize].clone(),
            eos: v.tokens[v.eos as usize].clone(),
            sep: v.tokens[v.sep as usize].clone(),
            pad: v.tokens[v.pad as usize].clone(),
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, bos: &str, eos: &str, sep: &str, pad: &str) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!("bad token string {t:?}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token {t:?}")));
            }
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("special token {name:?} missing")))
        };
        let (b, e, s, p) = (lookup(bos)?, lookup(eos)?, lookup(sep)?, lookup(pad)?);
        let mut specials = [b, e, s, p];
        specials.sort_unstable();
        if specials.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("special tokens must be distinct".into()));
        }
        if tokens.len() < 5 {
            return Err(Error::InvalidInput("vocabulary needs at least 5 tokens".into()));
        }
        Ok(Vocabulary {
            tokens,
            index,
            bos: b,
            eos: e,
            sep: s,
            pad: p,
        })
    }

    /// Builds `<bos> <eos> <a> <pad>` followed by `words`.
    pub fn with_specials(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = [BOS, EOS, SEP, PAD].iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Vocabulary::new(tokens, BOS, EOS, SEP, PAD)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }
    pub fn eos(&self) -> TokenId {
        self.eos
    }
    pub fn sep(&self) -> TokenId {
        self.sep
    }
    pub fn pad(&self) -> TokenId {
        self.pad
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

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.bos || id == self.eos || id == self.sep || id == self.pad
    }

    /// Tokens a model may put probability on. Begin-of-sequence and padding
    /// are never produced.
    pub fn is_emittable(&self, id: TokenId) -> bool {
        id != self.bos && id != self.pad
    }

    pub fn emittable_count(&self) -> usize {
        self.tokens.len() - 2
    }

    /// Whitespace tokenization; unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let ids = text
            .split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::InvalidInput(format!("token {w:?} not in vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSequence {
            ids,
            text: Some(text.to_string()),
        })
    }

    /// Space-joined token strings, skipping begin/end/padding markers.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| i != self.bos && i != self.eos && i != self.pad)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token ids plus (optionally) the text they came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSequence { ids, text: None }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks ids are in range and padding only appears as a trailing run.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if let Some(&bad) = self.ids.iter().find(|&&i| i as usize >= vocab.len()) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} out of vocabulary of size {}",
                vocab.len()
            )));
        }
        let body = self.trimmed(vocab);
        if body.contains(&vocab.pad()) {
            return Err(Error::InvalidInput("padding inside sequence".into()));
        }
        Ok(())
    }

    /// The ids with any trailing padding removed.
    pub fn trimmed(&self, vocab: &Vocabulary) -> &[TokenId] {
        let end = self
            .ids
            .iter()
            .rposition(|&i| i != vocab.pad())
            .map_or(0, |p| p + 1);
        &self.ids[..end]
    }

    /// Display text, falling back to decoding the ids.
    pub fn render(&self, vocab: &Vocabulary) -> String {
        match &self.text {
            Some(t) => t.clone(),
            None => vocab.decode(&self.ids),
        }
    }

    /// The ids followed by exactly one end-of-sequence marker.
    pub fn with_eos(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        let mut ids = self.ids.clone();
        if ids.last() != Some(&vocab.eos()) {
            ids.push(vocab.eos());
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_missing_or_shared_specials() {
        let toks = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(Vocabulary::new(toks(&["<bos>", "<eos>", "<a>", "a", "b"]), BOS, EOS, SEP, PAD).is_err());
        assert!(Vocabulary::new(toks(&["<bos>", "<eos>", "<a>", "<pad>", "b"]), BOS, EOS, SEP, BOS).is_err());
        assert!(Vocabulary::new(toks(&["<bos>", "<eos>", "<a>", "<pad>"]), BOS, EOS, SEP, PAD).is_err());
        assert!(Vocabulary::new(toks(&["<bos>", "<eos>", "<a>", "<pad>", "b", "b"]), BOS, EOS, SEP, PAD).is_err());
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::with_specials(["x", "y"].map(String::from)).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn interior_padding_is_invalid_but_trailing_is_fine() {
        let v = Vocabulary::with_specials(["x", "y"].map(String::from)).unwrap();
        let x = v.id("x").unwrap();
        assert!(TokenSequence::new(vec![x, v.pad(), v.pad()]).validate(&v).is_ok());
        assert!(TokenSequence::new(vec![x, v.pad(), x]).validate(&v).is_err());
        assert_eq!(TokenSequence::new(vec![x, v.pad()]).trimmed(&v), &[x]);
    }
}
