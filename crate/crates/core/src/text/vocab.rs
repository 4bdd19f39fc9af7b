use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Dense token ids; the first four are reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_words(words: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let ids: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if ids.len() != tokens.len() {
            return Err(Error::Format("vocabulary contains a duplicate token".into()));
        }
        Ok(Self { tokens, ids })
    }

    /// Builds ids from tokenized captions; tokens seen at least `min_count`
    /// times are ordered by count (descending) then lexicographically.
    pub fn build<'a, I>(captions: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Vec<String>>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut any = false;
        for caption in captions {
            any = true;
            for t in caption {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::EmptyCorpus("no captions to build a vocabulary from".into()));
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_words(kept.into_iter().map(|(t, _)| t.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `token`, or `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Non-reserved tokens, one per line; line `n` holds id `n + 4`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        Self::from_words(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 over the token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn build_examples() {
        let c = corpus(&["a dog", "a cat"]);
        let v = Vocabulary::build(&c, 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("cat"), 5);
        assert_eq!(v.id("dog"), 6);
        assert_eq!(Vocabulary::build(&c, 3).unwrap().len(), 4);
        assert_eq!(Vocabulary::build(&c, 1).unwrap(), v);
        assert!(matches!(Vocabulary::build(&Vec::new(), 1), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn file_round_trip_and_hash() {
        let c = corpus(&["rain on a roof", "a dog barks"]);
        let v = Vocabulary::build(&c, 1).unwrap();
        let back = Vocabulary::from_file_string(&v.to_file_string()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert!(v.to_file_string().starts_with("a\n"));
        let other = Vocabulary::build(&corpus(&["a dog"]), 1).unwrap();
        assert_ne!(other.hash(), v.hash());
    }
}
