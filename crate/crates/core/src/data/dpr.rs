//! DPR plain-text records: four lines (sentence, pronoun, `cand1,cand2`,
//! answer) separated by blank lines. The file carries no twin ids, so twins
//! are recognized by adjacency.

use std::fmt::Write as _;

use super::{link_adjacent, normalize_surface, Corpus, Ingested, RecordError, WinogradSchema};
use crate::error::Result;

pub fn parse_dpr(text: &str) -> Result<Ingested> {
    let mut schemas = Vec::new();
    let mut errors = Vec::new();
    let mut block: Vec<(usize, &str)> = Vec::new();
    let mut index = 0;
    let lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    for (no, line) in lines.chain(std::iter::once((0, ""))) {
        if !line.trim().is_empty() {
            block.push((no, line));
            continue;
        }
        if block.is_empty() {
            continue;
        }
        match record(&block) {
            Ok(s) => schemas.push(s),
            Err(detail) => errors.push(RecordError {
                record: index,
                line: Some(block[0].0),
                detail,
            }),
        }
        index += 1;
        block.clear();
    }
    Ok(Ingested {
        corpus: link_adjacent("dpr", schemas),
        errors,
    })
}

fn record(block: &[(usize, &str)]) -> std::result::Result<WinogradSchema, String> {
    if block.len() != 4 {
        return Err(format!("expected 4 lines, found {}", block.len()));
    }
    let sentence = block[0].1.trim();
    let pronoun = block[1].1.trim();
    let (c1, c2) = block[2]
        .1
        .split_once(',')
        .ok_or_else(|| format!("candidates line {:?} lacks a comma", block[2].1))?;
    let (c1, c2) = (c1.trim(), c2.trim());
    let answer = normalize_surface(block[3].1);
    let gold = if answer == normalize_surface(c1) {
        1
    } else if answer == normalize_surface(c2) {
        2
    } else {
        return Err(format!("answer {:?} matches neither candidate", block[3].1.trim()));
    };
    WinogradSchema::with_pronoun(sentence, pronoun, c1, c2, Some(gold), "").map_err(|e| e.to_string())
}

/// Serializes a corpus so that [`parse_dpr`] restores the same pairs.
/// Singles follow the pairs; records without a gold label cannot be
/// represented and are omitted.
pub fn write_dpr(corpus: &Corpus) -> String {
    let mut out = String::new();
    for s in corpus.schemas() {
        let Some(gold) = s.gold else { continue };
        if !out.is_empty() {
            out.push('\n');
        }
        let [c1, c2] = &s.candidates;
        let answer = &s.candidate(gold).surface;
        let _ = write!(out, "{}\n{}\n{},{}\n{}\n", s.text, s.pronoun(), c1.surface, c2.surface, answer);
    }
    out
}
