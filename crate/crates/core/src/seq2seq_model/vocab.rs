use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::synth_corpus::{SamplePair, EOC};
use crate::template_store::{LogSequence, TemplateId};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const UNK_TOKEN: &str = "<unk>";
/// Index 2 is spelled like the corpus end-of-commands token so targets map
/// onto it unchanged.
pub const RESERVED: [&str; 4] = [PAD_TOKEN, BOS_TOKEN, EOC, UNK_TOKEN];

/// Token ↔ index bijection with the four reserved entries first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens followed by `tokens` in the given order; duplicates
    /// and reserved names are skipped.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()).chain(tokens.into_iter().map(Into::into)) {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::Integrity("vocabulary does not start with the reserved tokens".into()));
        }
        let v = Vocab::new(tokens.iter().skip(4).cloned());
        if v.tokens.len() != tokens.len() {
            return Err(Error::Integrity("duplicate vocabulary entry".into()));
        }
        Ok(v)
    }

    /// Source vocabulary over template IDs seen in `pairs`, in numeric order.
    pub fn for_sources<'a>(pairs: impl IntoIterator<Item = &'a SamplePair>) -> Self {
        let ids: BTreeSet<u32> = pairs
            .into_iter()
            .flat_map(|p| p.source.iter().map(|t| t.get()))
            .filter(|&t| t != TemplateId::UNKNOWN.get())
            .collect();
        Vocab::new(ids.into_iter().map(|t| t.to_string()))
    }

    /// Target vocabulary over command tokens seen in `pairs`, sorted.
    pub fn for_targets<'a>(pairs: impl IntoIterator<Item = &'a SamplePair>) -> Self {
        let toks: BTreeSet<&str> = pairs
            .into_iter()
            .flat_map(|p| p.target.iter().map(String::as_str))
            .collect();
        Vocab::new(toks)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn index_or_unk(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_source(&self, src: &LogSequence) -> Vec<usize> {
        src.ids
            .iter()
            .map(|t| {
                if *t == TemplateId::UNKNOWN {
                    UNK
                } else {
                    self.index_or_unk(&t.get().to_string())
                }
            })
            .collect()
    }

    pub fn encode_target<S: AsRef<str>>(&self, toks: &[S]) -> Vec<usize> {
        toks.iter().map(|t| self.index_or_unk(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Vocab::from_tokens(Vec::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}
