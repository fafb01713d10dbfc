use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::text::tokenize;
use super::Study;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id map with reserved ids `PAD=0, BOS=1, EOS=2, UNK=3`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        let index = f
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens: f.tokens,
            index,
        }
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        Self { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// Builds from token sequences. Non-reserved tokens are sorted, so the
    /// result does not depend on input order.
    pub fn build<'a, I, S>(sequences: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a String>,
    {
        let mut set = BTreeSet::new();
        for seq in sequences {
            for tok in seq {
                if !RESERVED.contains(&tok.as_str()) {
                    set.insert(tok.clone());
                }
            }
        }
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(set).collect();
        VocabFile { tokens }.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to tokens, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    /// Hex SHA-256 over the ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Vocabulary over every report, indication, and serialization group.
    pub fn from_studies(studies: &[Study]) -> Self {
        let mut seqs: Vec<Vec<String>> = Vec::new();
        for s in studies {
            seqs.push(tokenize(&s.report));
            if let Some(ind) = &s.indication {
                seqs.push(tokenize(ind));
            }
            seqs.extend(s.factual_serialization.iter().map(|g| tokenize(g)));
        }
        Self::build(seqs.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn reserved_ids_and_round_trip() {
        let a = v(&["heart", "is", "enlarged", "."]);
        let b = v(&["lung", "is", "clear", "."]);
        let vocab = Vocabulary::build([&a, &b]);
        assert_eq!(vocab.token(PAD), Some("<pad>"));
        assert_eq!(vocab.len(), 4 + 6);
        let ids = vocab.encode(&a);
        assert_eq!(vocab.decode(&ids), a);
        assert_eq!(vocab.id("unseen"), UNK);
        let mut with_eos = ids.clone();
        with_eos.push(EOS);
        with_eos.push(vocab.id("lung"));
        assert_eq!(vocab.decode(&with_eos), a);
    }

    #[test]
    fn order_independent_and_hash_stable() {
        let a = v(&["x", "y"]);
        let b = v(&["z"]);
        let v1 = Vocabulary::build([&a, &b]);
        let v2 = Vocabulary::build([&b, &a]);
        assert_eq!(v1, v2);
        assert_eq!(v1.hash(), v2.hash());
        let v3 = Vocabulary::build([&a]);
        assert_ne!(v1.hash(), v3.hash());
    }

    #[test]
    fn serde_round_trip() {
        let vocab = Vocabulary::build([&v(&["a", "b"])]);
        let s = serde_json::to_string(&vocab).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vocab);
    }
}
