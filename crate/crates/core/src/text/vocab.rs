use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{SerializedSample, TextError};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
/// Node-name tokens "0".."63" always hold ids 2..66.
pub const NUM_NODE_TOKENS: usize = 64;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Splits on whitespace; every ASCII punctuation character is its own word.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if c.is_ascii_punctuation() {
                if start < i {
                    out.push(&chunk[start..i]);
                }
                out.push(&chunk[i..i + 1]);
                start = i + 1;
            }
        }
        if start < chunk.len() {
            out.push(&chunk[start..]);
        }
    }
    out
}

/// Whitespace normalization that detokenization reproduces exactly.
pub fn normalize(text: &str) -> String {
    split_words(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = TextError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        Self::from_tokens(tokens)
    }
}

fn reserved() -> Vec<String> {
    let mut out = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    out.extend((0..NUM_NODE_TOKENS).map(|i| i.to_string()));
    out
}

impl Vocabulary {
    /// Reserved tokens, then every other corpus word in lexicographic order,
    /// so the result does not depend on sample order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a SerializedSample>) -> Result<Self, TextError> {
        let mut words = BTreeSet::new();
        let mut any = false;
        for s in corpus {
            any = true;
            for (_, _, text) in s.spans() {
                words.extend(split_words(text).into_iter().map(str::to_string));
            }
        }
        if !any {
            return Err(TextError::EmptyCorpus);
        }
        let mut v = Self::from_tokens(reserved())?;
        v.extend(words);
        Ok(v)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TextError> {
        let head = reserved();
        if tokens.len() < head.len() || tokens[..head.len()] != head[..] {
            return Err(TextError::BadVocabulary(
                "missing reserved prefix".to_string(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TextError::BadVocabulary(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Appends unseen words in sorted order; existing ids are unchanged.
    pub fn extend(&mut self, words: impl IntoIterator<Item = String>) {
        let fresh: BTreeSet<String> = words
            .into_iter()
            .filter(|w| !self.index.contains_key(w))
            .collect();
        for w in fresh {
            self.index.insert(w.clone(), self.tokens.len() as u32);
            self.tokens.push(w);
        }
    }

    pub fn extend_from(&mut self, sample: &SerializedSample) {
        let words: Vec<String> = sample
            .spans()
            .iter()
            .flat_map(|s| split_words(s.2))
            .map(str::to_string)
            .collect();
        self.extend(words);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `word`, or `UNK`.
    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Owner {
    Node(usize),
    Query,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    Structure,
    Feature,
    Query,
}

/// Half-open token range `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub owner: Owner,
    pub kind: SpanKind,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedSample {
    pub ids: Vec<u32>,
    /// Contiguous spans covering `ids`: per node its structure span and
    /// optional feature span, then one query span.
    pub spans: Vec<Span>,
    /// Class index; zero until the dataset labels the sample.
    pub label: usize,
    pub gt_nodes: Option<BTreeSet<usize>>,
}

impl TokenizedSample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Node owners in sequence order.
    pub fn nodes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for s in &self.spans {
            if let Owner::Node(i) = s.owner {
                if out.last() != Some(&i) {
                    out.push(i);
                }
            }
        }
        out
    }

    pub fn query_span(&self) -> Option<&Span> {
        self.spans.iter().find(|s| s.owner == Owner::Query)
    }
}

pub fn tokenize(
    sample: &SerializedSample,
    vocab: &Vocabulary,
    max_positions: usize,
) -> Result<TokenizedSample, TextError> {
    let mut ids = Vec::new();
    let mut spans = Vec::new();
    for (owner, kind, text) in sample.spans() {
        let start = ids.len();
        ids.extend(split_words(text).into_iter().map(|w| vocab.id(w)));
        spans.push(Span {
            start,
            end: ids.len(),
            owner,
            kind,
        });
    }
    let required = ids.len();
    if required > max_positions {
        return Err(TextError::TooLong {
            required,
            max: max_positions,
        });
    }
    Ok(TokenizedSample {
        ids,
        spans,
        label: 0,
        gt_nodes: None,
    })
}

pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    ids.iter()
        .map(|&i| vocab.token(i).unwrap_or(UNK_TOKEN))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, TaskQuery};
    use crate::text::{serialize, SerializeOptions};

    #[test]
    fn split_separates_punctuation() {
        assert_eq!(
            split_words("Node 12 is connected to nodes 1, 5."),
            vec!["Node", "12", "is", "connected", "to", "nodes", "1", ",", "5", "."]
        );
        assert_eq!(split_words("0: [1, 2]"), vec!["0", ":", "[", "1", ",", "2", "]"]);
        assert_eq!(split_words("(3)"), vec!["(", "3", ")"]);
    }

    #[test]
    fn vocabulary_round_trip_and_unknowns() {
        let g = Graph::from_edges(2, [(0, 1)]).unwrap();
        let s = serialize(&g, &TaskQuery::Cycle, &SerializeOptions::default()).unwrap();
        let v = Vocabulary::build([&s]).unwrap();
        for w in ["Node", "0", "is", "connected", "to", "node", "1", "."] {
            assert_eq!(v.token(v.id(w)), Some(w));
        }
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.id("0"), 2);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_tokens(vec!["x".into()]).is_err());
    }

    #[test]
    fn tokenize_spans_and_length_limit() {
        let g = Graph::from_edges(2, [(0, 1)]).unwrap();
        let s = serialize(&g, &TaskQuery::Cycle, &SerializeOptions::default()).unwrap();
        let v = Vocabulary::build([&s]).unwrap();
        let t = tokenize(&s, &v, 64).unwrap();
        let total = t.len();
        let owners: Vec<Owner> = t.spans.iter().map(|s| s.owner).collect();
        assert_eq!(owners, vec![Owner::Node(0), Owner::Node(1), Owner::Query]);
        assert_eq!(t.spans[0].len(), 8);
        assert_eq!(detokenize(&t.ids, &v), normalize(&s.text()));
        assert_eq!(
            tokenize(&s, &v, 3),
            Err(TextError::TooLong {
                required: total,
                max: 3
            })
        );
    }
}
