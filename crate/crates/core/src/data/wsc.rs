//! WSC collection XML: `<schema>` records holding `<text><txt1/><pron/><txt2/></text>`,
//! `<answers>` with two `<answer>` children, and `<correctAnswer>`.

use roxmltree::{Document, Node};

use super::{link_adjacent, Ingested, RecordError, WinogradSchema};
use crate::error::{Error, Result};

pub fn parse_wsc_xml(bytes: &[u8]) -> Result<Ingested> {
    let source = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        path: "/".into(),
        detail: format!("invalid UTF-8: {e}"),
    })?;
    let doc = Document::parse(source).map_err(|e| Error::Parse {
        path: "/".into(),
        detail: e.to_string(),
    })?;
    let root = doc.root_element();
    let mut schemas = Vec::new();
    let mut errors = Vec::new();
    for (index, node) in root.children().filter(|n| n.has_tag_name("schema")).enumerate() {
        let path = format!("{}/schema[{index}]", root.tag_name().name());
        match record(node, &path, index) {
            Ok(Ok(s)) => schemas.push(s),
            Ok(Err(skip)) => errors.push(skip),
            Err(e) => return Err(e),
        }
    }
    Ok(Ingested {
        corpus: link_adjacent("wsc", schemas),
        errors,
    })
}

fn child<'a>(node: Node<'a, 'a>, name: &str, path: &str) -> Result<Node<'a, 'a>> {
    node.children().find(|n| n.has_tag_name(name)).ok_or_else(|| Error::Parse {
        path: format!("{path}/{name}"),
        detail: "missing element".into(),
    })
}

fn text_of(node: Node<'_, '_>) -> String {
    let raw: String = node.descendants().filter(|n| n.is_text()).filter_map(|n| n.text()).collect();
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Structural problems are fatal; content problems skip the record.
fn record(node: Node<'_, '_>, path: &str, index: usize) -> Result<std::result::Result<WinogradSchema, RecordError>> {
    let text = child(node, "text", path)?;
    let tpath = format!("{path}/text");
    let before = text_of(child(text, "txt1", &tpath)?);
    let pron = text_of(child(text, "pron", &tpath)?);
    let after = text_of(child(text, "txt2", &tpath)?);
    let answers: Vec<String> = child(node, "answers", path)?
        .children()
        .filter(|n| n.has_tag_name("answer"))
        .map(text_of)
        .collect();
    let correct = text_of(child(node, "correctAnswer", path)?);

    let skip = |detail: String| {
        Ok(Err(RecordError {
            record: index,
            line: None,
            detail: format!("{path}: {detail}"),
        }))
    };
    if answers.len() != 2 {
        return skip(format!("expected 2 answers, found {}", answers.len()));
    }
    let gold = match correct.trim().chars().next().map(|c| c.to_ascii_uppercase()) {
        Some('A') => 1,
        Some('B') => 2,
        _ => return skip(format!("unrecognized correctAnswer {correct:?}")),
    };

    let mut sentence = before;
    if !sentence.is_empty() {
        sentence.push(' ');
    }
    let start = sentence.len();
    sentence.push_str(&pron);
    let end = sentence.len();
    if !after.is_empty() {
        if !after.starts_with(|c: char| c.is_ascii_punctuation()) {
            sentence.push(' ');
        }
        sentence.push_str(&after);
    }
    match WinogradSchema::new(sentence, start..end, &answers[0], &answers[1], Some(gold), "") {
        Ok(s) => Ok(Ok(s)),
        Err(e) => skip(e.to_string()),
    }
}
