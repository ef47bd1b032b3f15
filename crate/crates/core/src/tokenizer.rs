//! Whitespace pre-tokenization followed by greedy longest-match against a
//! fixed vocabulary. The tokenizer file is a JSON object mapping surface
//! strings to dense integer ids `0..n`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    max_token_chars: usize,
    unk: Option<u32>,
}

impl Tokenizer {
    /// Builds a tokenizer from tokens listed in id order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::TokenizerFormat("empty token string".into()));
            }
            if tok.chars().any(char::is_whitespace) && tok != UNK {
                return Err(Error::TokenizerFormat(format!(
                    "token {tok:?} contains whitespace"
                )));
            }
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::TokenizerFormat(format!("duplicate token {tok:?}")));
            }
        }
        let max_token_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(0);
        let unk = token_to_id.get(UNK).copied();
        Ok(Self {
            id_to_token: tokens,
            token_to_id,
            max_token_chars,
            unk,
        })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let map: BTreeMap<String, u64> =
            serde_json::from_slice(bytes).map_err(|e| Error::json("tokenizer", e))?;
        let n = map.len();
        let mut slots: Vec<Option<String>> = vec![None; n];
        for (tok, id) in map {
            let idx = usize::try_from(id)
                .ok()
                .filter(|&i| i < n)
                .ok_or_else(|| {
                    Error::TokenizerFormat(format!("id {id} of {tok:?} outside dense range 0..{n}"))
                })?;
            if slots[idx].is_some() {
                return Err(Error::TokenizerFormat(format!("id {id} assigned twice")));
            }
            slots[idx] = Some(tok);
        }
        // every slot is filled: n distinct ids in 0..n
        Self::from_tokens(slots.into_iter().map(Option::unwrap).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, u32> = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        serde_json::to_string_pretty(&map).expect("tokenizer serializes")
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            let chars: Vec<(usize, char)> = word.char_indices().collect();
            let mut i = 0;
            while i < chars.len() {
                let start = chars[i].0;
                let longest = self.max_token_chars.min(chars.len() - i);
                let hit = (1..=longest).rev().find_map(|len| {
                    let end = chars.get(i + len).map_or(word.len(), |c| c.0);
                    self.token_to_id.get(&word[start..end]).map(|&id| (id, len))
                });
                match (hit, self.unk) {
                    (Some((id, len)), _) => {
                        ids.push(id);
                        i += len;
                    }
                    (None, Some(unk)) => {
                        ids.push(unk);
                        i += 1;
                    }
                    (None, None) => {
                        return Err(Error::Tokenize {
                            text: text.to_string(),
                            rest: word[start..].to_string(),
                        })
                    }
                }
            }
        }
        Ok(ids)
    }

    /// First token of `surface`, used as the canonical party token.
    pub fn first_token(&self, surface: &str) -> Result<u32> {
        self.encode(surface)?
            .first()
            .copied()
            .ok_or_else(|| Error::Tokenize {
                text: surface.to_string(),
                rest: String::new(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(words: &[&str]) -> Tokenizer {
        Tokenizer::from_tokens(words.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn greedy_longest_match() {
        let t = tok(&["a", "ab", "abc", "c", "d", "."]);
        assert_eq!(t.encode("abcd abd.").unwrap(), vec![2, 4, 1, 4, 5]);
    }

    #[test]
    fn unmatched_without_unk_is_error() {
        let t = tok(&["a"]);
        assert!(matches!(t.encode("ab"), Err(Error::Tokenize { .. })));
        let t = tok(&["a", UNK]);
        assert_eq!(t.encode("ab").unwrap(), vec![0, 1]);
    }

    #[test]
    fn multibyte_characters() {
        let t = tok(&["30–39", "ä", "x"]);
        assert_eq!(t.encode("30–39 äx").unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn json_requires_dense_ids() {
        assert!(Tokenizer::from_json(br#"{"a":0,"b":2}"#).is_err());
        assert!(Tokenizer::from_json(br#"{"a":0,"b":0}"#).is_err());
        let t = Tokenizer::from_json(br#"{"b":1,"a":0}"#).unwrap();
        assert_eq!(Tokenizer::from_json(t.to_json().as_bytes()).unwrap(), t);
    }
}
