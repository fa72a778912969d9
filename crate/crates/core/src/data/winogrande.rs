//! WinoGrande JSON lines: `sentence` with one `_` blank, `option1`,
//! `option2`, and `answer` ("1", "2", or empty for unlabeled test sets).
//! Twins are not reliably adjacent in these files, so every record is a single.

use serde_json::Value;

use super::{Corpus, Ingested, RecordError, WinogradSchema};
use crate::error::Result;

pub fn parse_winogrande_jsonl(text: &str) -> Result<Ingested> {
    let mut corpus = Corpus::new("winogrande");
    let mut errors = Vec::new();
    let mut index = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match record(line, corpus.singles.len()) {
            Ok(s) => corpus.singles.push(s),
            Err(detail) => errors.push(RecordError {
                record: index,
                line: Some(i + 1),
                detail,
            }),
        }
        index += 1;
    }
    Ok(Ingested { corpus, errors })
}

fn record(line: &str, n: usize) -> std::result::Result<WinogradSchema, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let field = |name: &str| -> std::result::Result<String, String> {
        match v.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Number(x)) => Ok(x.to_string()),
            Some(_) => Err(format!("field {name:?} is not a string")),
            None => Err(format!("missing field {name:?}")),
        }
    };
    let sentence = field("sentence")?;
    let (o1, o2) = (field("option1")?, field("option2")?);
    let gold = match v.get("answer") {
        None => None,
        Some(_) => match field("answer")?.trim() {
            "" => None,
            "1" => Some(1),
            "2" => Some(2),
            other => return Err(format!("answer {other:?} is not 1 or 2")),
        },
    };
    let blanks: Vec<usize> = sentence.match_indices('_').map(|(i, _)| i).collect();
    if blanks.len() != 1 {
        return Err(format!("expected one '_' blank, found {}", blanks.len()));
    }
    let at = blanks[0];
    WinogradSchema::new(sentence, at..at + 1, o1, o2, gold, format!("winogrande-s{n}")).map_err(|e| e.to_string())
}
