//! Winograd-style schemas, twin pairs, corpora, and their ingestion.
//!
//! Text positions are byte offsets into [`WinogradSchema::text`]. Candidate
//! matching is ASCII case-insensitive and ignores a leading article on the
//! candidate surface, so `"The trophy"` matches `trophy` in the sentence.

mod dpr;
mod split;
mod synthetic;
mod winogrande;
mod wsc;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dpr::{parse_dpr, write_dpr};
pub use split::split;
pub use synthetic::{generate_synthetic, SynthSpec, Template};
pub use winogrande::parse_winogrande_jsonl;
pub use wsc::parse_wsc_xml;

const ARTICLES: [&str; 3] = ["the", "a", "an"];

/// Role 1 or 2 in the ordered candidate pair.
pub type Role = u8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub surface: String,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinogradSchema {
    pub text: String,
    pub pronoun_span: Range<usize>,
    pub candidates: [Candidate; 2],
    /// Evaluation only; never reaches the training loss.
    pub gold: Option<Role>,
    pub twin_id: String,
}

impl WinogradSchema {
    /// Builds a schema and checks every structural invariant.
    pub fn new(
        text: impl Into<String>,
        pronoun_span: Range<usize>,
        first: impl Into<String>,
        second: impl Into<String>,
        gold: Option<Role>,
        twin_id: impl Into<String>,
    ) -> Result<Self> {
        let schema = WinogradSchema {
            text: text.into(),
            pronoun_span,
            candidates: [
                Candidate {
                    surface: first.into(),
                    role: 1,
                },
                Candidate {
                    surface: second.into(),
                    role: 2,
                },
            ],
            gold,
            twin_id: twin_id.into(),
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Like [`WinogradSchema::new`], with the pronoun at the first
    /// whole-word occurrence of `pronoun`.
    pub fn with_pronoun(
        text: impl Into<String>,
        pronoun: &str,
        first: impl Into<String>,
        second: impl Into<String>,
        gold: Option<Role>,
        twin_id: impl Into<String>,
    ) -> Result<Self> {
        let text = text.into();
        let span = find_word(&text, pronoun, &(0..0))
            .ok_or_else(|| Error::Encoding(format!("pronoun {pronoun:?} not in {text:?}")))?;
        Self::new(text, span, first, second, gold, twin_id)
    }

    pub fn validate(&self) -> Result<()> {
        let span = &self.pronoun_span;
        if span.start >= span.end
            || span.end > self.text.len()
            || !self.text.is_char_boundary(span.start)
            || !self.text.is_char_boundary(span.end)
        {
            return Err(Error::Contract(format!(
                "pronoun span {span:?} is not inside the text ({} bytes)",
                self.text.len()
            )));
        }
        if let Some(g) = self.gold {
            if g != 1 && g != 2 {
                return Err(Error::Contract(format!("gold label {g} is not 1 or 2")));
            }
        }
        for c in &self.candidates {
            if c.surface.trim().is_empty() {
                return Err(Error::Contract("empty candidate surface".into()));
            }
            self.candidate_span(c.role)?;
        }
        Ok(())
    }

    pub fn pronoun(&self) -> &str {
        &self.text[self.pronoun_span.clone()]
    }

    pub fn candidate(&self, role: Role) -> &Candidate {
        &self.candidates[usize::from(role == 2)]
    }

    /// Byte range of a candidate's first occurrence outside the pronoun,
    /// excluding any leading article.
    pub fn candidate_span(&self, role: Role) -> Result<Range<usize>> {
        let surface = &self.candidate(role).surface;
        locate(&self.text, surface, &self.pronoun_span).ok_or_else(|| {
            Error::Contract(format!("candidate {surface:?} not found in {:?}", self.text))
        })
    }

    pub fn without_label(&self) -> Self {
        WinogradSchema {
            gold: None,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwinPair {
    pub first: WinogradSchema,
    pub second: WinogradSchema,
}

impl TwinPair {
    pub fn new(first: WinogradSchema, second: WinogradSchema) -> Result<Self> {
        let pair = TwinPair { first, second };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = (&self.first, &self.second);
        a.validate()?;
        b.validate()?;
        if a.twin_id != b.twin_id {
            return Err(Error::Contract(format!("twin ids differ: {} vs {}", a.twin_id, b.twin_id)));
        }
        if !same_candidates(a, b) {
            return Err(Error::Contract(format!("twins of {} do not share candidates", a.twin_id)));
        }
        if a.text == b.text {
            return Err(Error::Contract(format!("twins of {} have identical text", a.twin_id)));
        }
        if let (Some(x), Some(y)) = (a.gold, b.gold) {
            if x == y {
                return Err(Error::Contract(format!("twins of {} share gold label {x}", a.twin_id)));
            }
        }
        Ok(())
    }

    pub fn members(&self) -> [&WinogradSchema; 2] {
        [&self.first, &self.second]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub pairs: Vec<TwinPair>,
    pub singles: Vec<WinogradSchema>,
}

impl Corpus {
    pub fn new(name: impl Into<String>) -> Self {
        Corpus {
            name: name.into(),
            ..Default::default()
        }
    }

    /// Schema count: two per pair plus the singles.
    pub fn len(&self) -> usize {
        2 * self.pairs.len() + self.singles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pair members in order, then singles.
    pub fn schemas(&self) -> impl Iterator<Item = &WinogradSchema> {
        self.pairs
            .iter()
            .flat_map(|p| [&p.first, &p.second])
            .chain(self.singles.iter())
    }
}

/// One record that could not be ingested.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RecordError {
    /// Zero-based record index within the source.
    pub record: usize,
    /// One-based source line, where the format has lines.
    pub line: Option<usize>,
    pub detail: String,
}

/// Parser result: the corpus plus every record skipped on the way.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub corpus: Corpus,
    pub errors: Vec<RecordError>,
}

/// Lowercased candidate surface without a leading article.
pub fn normalize_surface(surface: &str) -> String {
    let lower = surface.trim().to_ascii_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    let start = usize::from(words.len() > 1 && ARTICLES.contains(&words[0]));
    words[start..].join(" ")
}

/// Surface with any leading article removed, original casing kept.
pub(crate) fn strip_article(surface: &str) -> &str {
    let s = surface.trim();
    for art in ARTICLES {
        if s.len() > art.len() + 1
            && s[..art.len()].eq_ignore_ascii_case(art)
            && s.as_bytes()[art.len()].is_ascii_whitespace()
        {
            return s[art.len()..].trim_start();
        }
    }
    s
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b >= 0x80
}

/// First whole-word, case-insensitive occurrence of `needle` in `text`
/// that does not overlap `exclude`. Inner whitespace in `needle` matches any
/// whitespace run.
pub(crate) fn find_word(text: &str, needle: &str, exclude: &Range<usize>) -> Option<Range<usize>> {
    let words: Vec<&str> = needle.split_whitespace().collect();
    if words.is_empty() {
        return None;
    }
    let bytes = text.as_bytes();
    let mut start = 0;
    while start < bytes.len() {
        if text.is_char_boundary(start) && (start == 0 || !is_word_byte(bytes[start - 1])) {
            if let Some(end) = match_words(text, start, &words) {
                let after_ok = end == bytes.len() || !is_word_byte(bytes[end]);
                let overlaps = start < exclude.end && exclude.start < end;
                if after_ok && !overlaps {
                    return Some(start..end);
                }
            }
        }
        start += 1;
    }
    None
}

fn match_words(text: &str, mut pos: usize, words: &[&str]) -> Option<usize> {
    let bytes = text.as_bytes();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            let ws_start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos == ws_start {
                return None;
            }
        }
        let end = pos + w.len();
        if end > bytes.len() || !text.is_char_boundary(end) || !text[pos..end].eq_ignore_ascii_case(w) {
            return None;
        }
        pos = end;
    }
    Some(pos)
}

/// Candidate span resolution: article stripped, first occurrence outside the
/// pronoun wins.
pub(crate) fn locate(text: &str, surface: &str, pronoun: &Range<usize>) -> Option<Range<usize>> {
    find_word(text, strip_article(surface), pronoun)
}

pub(crate) fn same_candidates(a: &WinogradSchema, b: &WinogradSchema) -> bool {
    a.candidates
        .iter()
        .zip(&b.candidates)
        .all(|(x, y)| normalize_surface(&x.surface) == normalize_surface(&y.surface))
}

/// Greedy adjacency linking: records `i` and `i + 1` become a pair when they
/// satisfy every pair invariant, otherwise `i` becomes a single.
pub(crate) fn link_adjacent(name: &str, schemas: Vec<WinogradSchema>) -> Corpus {
    let mut corpus = Corpus::new(name);
    let mut iter = schemas.into_iter().peekable();
    while let Some(a) = iter.next() {
        let linked = iter.peek().and_then(|b| {
            let mut first = a.clone();
            let mut second = b.clone();
            let id = format!("{name}-{}", corpus.pairs.len());
            first.twin_id = id.clone();
            second.twin_id = id;
            TwinPair::new(first, second).ok()
        });
        match linked {
            Some(pair) => {
                iter.next();
                corpus.pairs.push(pair);
            }
            None => {
                let mut single = a;
                single.twin_id = format!("{name}-s{}", corpus.singles.len());
                corpus.singles.push(single);
            }
        }
    }
    corpus
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_and_normalize() {
        assert_eq!(strip_article("The trophy"), "trophy");
        assert_eq!(strip_article("an apple pie"), "apple pie");
        assert_eq!(strip_article("Theo"), "Theo");
        assert_eq!(normalize_surface(" The Red  Box "), "red box");
        assert_eq!(normalize_surface("the"), "the");
    }

    #[test]
    fn locate_skips_pronoun_and_partial_words() {
        let text = "it said it hit the bit";
        assert_eq!(find_word(text, "it", &(0..2)), Some(8..10));
        assert_eq!(find_word(text, "bit", &(0..0)), Some(19..22));
        assert_eq!(find_word("The Trophy fit", "trophy", &(0..0)), Some(4..10));
        assert_eq!(find_word("the red   box", "red box", &(0..0)), Some(4..13));
        assert_eq!(find_word("trophies", "trophy", &(0..0)), None);
    }

    #[test]
    fn schema_invariants() {
        let text = "The trophy doesn't fit in the suitcase because it is too small.";
        let p = text.find(" it ").unwrap() + 1;
        let s = WinogradSchema::new(text, p..p + 2, "the trophy", "the suitcase", Some(2), "t").unwrap();
        assert_eq!(s.pronoun(), "it");
        assert_eq!(&text[s.candidate_span(1).unwrap()], "trophy");
        assert!(WinogradSchema::new(text, p..p + 2, "box", "suitcase", None, "t").is_err());
        assert!(WinogradSchema::new(text, p..p + 2, "trophy", "suitcase", Some(3), "t").is_err());
        assert!(WinogradSchema::new(text, 0..500, "trophy", "suitcase", None, "t").is_err());
    }

    #[test]
    fn pair_invariants() {
        let mk = |t: &str, gold| {
            let p = t.find(" it ").unwrap() + 1;
            WinogradSchema::new(t, p..p + 2, "trophy", "suitcase", Some(gold), "x").unwrap()
        };
        let big = mk("the trophy did not fit in the suitcase because it was too big", 1);
        let small = mk("the trophy did not fit in the suitcase because it was too small", 2);
        assert!(TwinPair::new(big.clone(), small.clone()).is_ok());
        assert!(TwinPair::new(big.clone(), big.clone()).is_err());
        let mut same_gold = small.clone();
        same_gold.gold = Some(1);
        assert!(TwinPair::new(big, same_gold).is_err());
    }
}
