//! Word-level vocabulary and masked encoding of schemas.
//!
//! Text is lowercased, split on whitespace, and every ASCII punctuation
//! character becomes a token of its own.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use crate::data::{strip_article, Corpus, Role, WinogradSchema};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const UNK: u32 = 2;
pub const BOS: u32 = 3;
pub const EOS: u32 = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[MASK]", "[UNK]", "[BOS]", "[EOS]"];

/// Tokens of `text` with their byte ranges.
pub fn tokenize(text: &str) -> Vec<(String, Range<usize>)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() || ch.is_ascii_punctuation() {
            if let Some(s) = start.take() {
                out.push((text[s..i].to_lowercase(), s..i));
            }
            if ch.is_ascii_punctuation() {
                out.push((ch.to_string(), i..i + 1));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((text[s..].to_lowercase(), s..text.len()));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved tokens first, then `tokens` in the given order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()).chain(tokens) {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Contract(format!("invalid vocabulary token {t:?}")));
            }
            if vocab.index.insert(t.clone(), vocab.tokens.len() as u32).is_some() {
                return Err(Error::Contract(format!("duplicate vocabulary token {t:?}")));
            }
            vocab.tokens.push(t);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Contract("vocabulary does not start with the reserved tokens".into()));
        }
        Self::from_tokens(tokens[RESERVED.len()..].iter().map(|s| s.to_string()))
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("[?]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Frequency-descending, then lexicographic; tokens seen fewer than
/// `min_count` times are left out and encode as UNK.
pub fn build_vocab(corpus: &Corpus, min_count: usize) -> Vocab {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in corpus.schemas() {
        for (t, _) in tokenize(&s.text) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_tokens(entries.into_iter().map(|(t, _)| t)).expect("tokenizer output is valid vocabulary")
}

/// A schema in token space. Carries no gold label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSchema {
    /// BOS … EOS with the pronoun replaced by a single MASK.
    pub ids: Vec<u32>,
    pub mask_pos: usize,
    pub spans: [Range<usize>; 2],
    /// Twin id of the source schema.
    pub source: String,
}

impl EncodedSchema {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn span(&self, role: Role) -> &Range<usize> {
        &self.spans[usize::from(role == 2)]
    }

    /// Target ids of a candidate: its tokens as they appear in the sentence.
    pub fn candidate_ids(&self, role: Role) -> &[u32] {
        &self.ids[self.span(role).clone()]
    }
}

pub fn encode_masked(schema: &WinogradSchema, vocab: &Vocab, max_len: usize) -> Result<EncodedSchema> {
    let tokens = tokenize(&schema.text);
    let pron = &schema.pronoun_span;
    let mut ids = vec![BOS];
    let mut mask_pos = None;
    // token index in `ids` for each source token
    let mut pos = Vec::with_capacity(tokens.len());
    for (t, r) in &tokens {
        if r.start < pron.end && pron.start < r.end {
            if mask_pos.is_none() {
                mask_pos = Some(ids.len());
                ids.push(MASK);
            }
            pos.push(None);
        } else {
            pos.push(Some(ids.len()));
            ids.push(vocab.id(t));
        }
    }
    ids.push(EOS);
    let mask_pos = mask_pos.ok_or_else(|| Error::Encoding(format!("pronoun vanished in {:?}", schema.text)))?;
    if ids.len() > max_len {
        return Err(Error::Length {
            len: ids.len(),
            max: max_len,
        });
    }

    let mut spans = [0..0, 0..0];
    for (k, c) in schema.candidates.iter().enumerate() {
        let fail = || Error::Encoding(format!("candidate {:?} not locatable in {:?}", c.surface, schema.text));
        let bytes = schema.candidate_span(c.role).map_err(|_| fail())?;
        let inside: Vec<usize> = tokens
            .iter()
            .zip(&pos)
            .filter(|((_, r), _)| r.start >= bytes.start && r.end <= bytes.end)
            .map(|(_, p)| p.ok_or_else(fail))
            .collect::<Result<_>>()?;
        let expected: Vec<String> = tokenize(strip_article(&c.surface)).into_iter().map(|(t, _)| t).collect();
        let got: Vec<&str> = inside
            .iter()
            .map(|&p| tokens.iter().zip(&pos).find(|(_, q)| **q == Some(p)).unwrap().0 .0.as_str())
            .collect();
        if inside.is_empty() || got != expected || inside.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(fail());
        }
        spans[k] = inside[0]..inside[inside.len() - 1] + 1;
    }
    if spans[0].start < spans[1].end && spans[1].start < spans[0].end {
        return Err(Error::Encoding(format!("candidate spans overlap in {:?}", schema.text)));
    }
    Ok(EncodedSchema {
        ids,
        mask_pos,
        spans,
        source: schema.twin_id.clone(),
    })
}

/// Sequence with a candidate's slot opened at the pronoun.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Substituted {
    /// The MASK at the pronoun widened to one MASK per candidate token.
    pub ids: Vec<u32>,
    pub targets: Vec<u32>,
    /// Positions of the widened MASK run.
    pub target_positions: Range<usize>,
    pub spans: [Range<usize>; 2],
}

pub fn substitute_candidate(enc: &EncodedSchema, role: Role, max_len: usize) -> Result<Substituted> {
    if role != 1 && role != 2 {
        return Err(Error::Contract(format!("candidate role {role} is not 1 or 2")));
    }
    let targets = enc.candidate_ids(role).to_vec();
    let n = targets.len();
    let m = enc.mask_pos;
    let mut ids = Vec::with_capacity(enc.len() + n - 1);
    ids.extend_from_slice(&enc.ids[..m]);
    ids.extend(std::iter::repeat(MASK).take(n));
    ids.extend_from_slice(&enc.ids[m + 1..]);
    if ids.len() > max_len {
        return Err(Error::Length {
            len: ids.len(),
            max: max_len,
        });
    }
    let shift = |r: &Range<usize>| if r.start > m { r.start + n - 1..r.end + n - 1 } else { r.clone() };
    Ok(Substituted {
        ids,
        targets,
        target_positions: m..m + n,
        spans: [shift(&enc.spans[0]), shift(&enc.spans[1])],
    })
}
