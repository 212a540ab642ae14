use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOA: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SEP: TokenId = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eoa>", "<unk>", "|"];
const GLUE: &str = "@@";
const TRAILING_PUNCT: &[char] = &[',', '.', '?', '!', ';', ':'];

/// Splits text into word-level pieces. Trailing punctuation attached to a word
/// becomes a separate glued piece (`"london,"` -> `["london", "@@,"]`) so that
/// the bare word keeps a single id and decoding restores the original spacing.
pub fn pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut core = word;
        let mut tail = Vec::new();
        while let Some(c) = core.chars().last() {
            if core.len() > c.len_utf8() && TRAILING_PUNCT.contains(&c) {
                tail.push(c);
                core = &core[..core.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        out.push(core.to_string());
        out.extend(tail.into_iter().rev().map(|c| format!("{GLUE}{c}")));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds a vocabulary from the pieces of the given texts (sorted, after the specials).
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            for p in pieces(t) {
                if !SPECIALS.contains(&p.as_str()) {
                    words.insert(p);
                }
            }
        }
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Vocabulary::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Checkpoint("vocabulary must start with the special tokens".into()));
        }
        if tokens.len() > TokenId::MAX as usize {
            return Err(Error::Checkpoint("vocabulary too large".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Checkpoint(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, piece: &str) -> TokenId {
        self.index.get(piece).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.index.contains_key(piece)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        pieces(text).iter().map(|p| self.id(p)).collect()
    }

    /// Inverse of [`encode`](Self::encode) on in-vocabulary text. `<eoa>` and
    /// `<pad>`/`<bos>` are dropped; out-of-range ids decode as `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | BOS | EOA) {
                continue;
            }
            let tok = self.token(id).unwrap_or(SPECIALS[UNK as usize]);
            if let Some(glued) = tok.strip_prefix(GLUE).filter(|g| !g.is_empty() && !out.is_empty()) {
                out.push_str(glued);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pieces_split_trailing_punctuation() {
        assert_eq!(pieces("to london, slot"), vec!["to", "london", "@@,", "slot"]);
        assert_eq!(pieces("a ? b"), vec!["a", "?", "b"]);
        assert_eq!(pieces("at 17:00."), vec!["at", "17:00", "@@."]);
        assert_eq!(pieces("value : x"), vec!["value", ":", "x"]);
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::build(["belief states: value = london, slot ="]);
        assert_eq!(v.decode(&v.encode("belief states")), "belief states");
        assert!(v.encode("").is_empty());
        assert_eq!(v.encode("zebra"), vec![UNK]);
        let s = "belief states: value = london, slot =";
        assert_eq!(v.decode(&v.encode(s)), s);
        assert_eq!(v.encode("a | b")[1], SEP);
    }

    #[test]
    fn rejects_bad_token_lists() {
        assert!(Vocabulary::from_tokens(vec!["x".into()]).is_err());
        let mut t: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        t.push("a".into());
        t.push("a".into());
        assert!(Vocabulary::from_tokens(t).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_in_vocabulary(words in proptest::collection::vec("[a-z0-9]{1,5}[,.?]?", 1..12)) {
            let text = words.join(" ");
            let v = Vocabulary::build([text.as_str()]);
            prop_assert_eq!(v.decode(&v.encode(&text)), text);
        }
    }
}
