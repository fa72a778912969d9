//! Disambiguation accuracy and MASK-to-candidate attention statistics.
//!
//! An [`AttentionMap`] is indexed `[head][layer]`; entry `(h, l)` is the MASK
//! row of layer `l`, head `h`, summed over one candidate's tokens. Entropy
//! treats the whole map, normalized, as one distribution and is reported in
//! nats.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Role};
use crate::error::{Error, Result};
use crate::losses::candidate_likelihoods;
use crate::model::{AttentionTensor, Model};
use crate::tokenizer::{encode_masked, EncodedSchema, Vocab};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub role: Role,
    pub p: [f64; 2],
    /// Exact tie, resolved toward role 1.
    pub tie: bool,
}

pub fn predict(model: &Model, enc: &EncodedSchema) -> Result<Prediction> {
    Ok(decide(candidate_likelihoods(model, enc)?))
}

pub fn decide(p: [f64; 2]) -> Prediction {
    Prediction {
        role: if p[1] > p[0] { 2 } else { 1 },
        p,
        tie: p[0] == p[1],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub enc: EncodedSchema,
    pub gold: Role,
}

/// Encoded evaluation schemas with their gold labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub name: String,
    pub items: Vec<Labeled>,
    pub unlabeled: usize,
    /// Schemas that failed to encode.
    pub skipped: usize,
}

pub fn encode_labeled(corpus: &Corpus, vocab: &Vocab, max_len: usize) -> LabeledSet {
    let mut set = LabeledSet {
        name: corpus.name.clone(),
        items: Vec::new(),
        unlabeled: 0,
        skipped: 0,
    };
    for s in corpus.schemas() {
        let Some(gold) = s.gold else {
            set.unlabeled += 1;
            continue;
        };
        match encode_masked(s, vocab, max_len) {
            Ok(enc) => set.items.push(Labeled { enc, gold }),
            Err(e) => {
                log::warn!("skipping {}: {e}", s.twin_id);
                set.skipped += 1;
            }
        }
    }
    set
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub dataset: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub ties: usize,
    pub unlabeled: usize,
    pub skipped: usize,
}

pub fn accuracy(model: &Model, set: &LabeledSet) -> Result<AccuracyReport> {
    if set.items.is_empty() {
        return Err(Error::Evaluation(format!("no labeled schemas to evaluate in {}", set.name)));
    }
    let (mut correct, mut ties) = (0, 0);
    for item in &set.items {
        let p = predict(model, &item.enc)?;
        correct += usize::from(p.role == item.gold);
        ties += usize::from(p.tie);
    }
    Ok(AccuracyReport {
        dataset: set.name.clone(),
        accuracy: correct as f64 / set.items.len() as f64,
        correct,
        total: set.items.len(),
        ties,
        unlabeled: set.unlabeled,
        skipped: set.skipped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub heads: usize,
    pub layers: usize,
    /// Row-major `[head][layer]`.
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn at(&self, head: usize, layer: usize) -> f64 {
        self.values[head * self.layers + layer]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Keeps the last `k` layer columns.
    pub fn last_layers(&self, k: usize) -> AttentionMap {
        let k = k.min(self.layers);
        let values = (0..self.heads)
            .flat_map(|h| (self.layers - k..self.layers).map(move |l| (h, l)))
            .map(|(h, l)| self.at(h, l))
            .collect();
        AttentionMap {
            heads: self.heads,
            layers: k,
            values,
        }
    }
}

/// `(A_r, A_w)` from an attention tensor: right is the gold candidate.
pub fn maps_from_tensor(attn: &AttentionTensor, enc: &EncodedSchema, gold: Role) -> (AttentionMap, AttentionMap) {
    let map = |role: Role| {
        let span = enc.span(role).clone();
        let values = (0..attn.heads)
            .flat_map(|h| (0..attn.layers).map(move |l| (h, l)))
            .map(|(h, l)| attn.row(l, h, enc.mask_pos)[span.clone()].iter().sum())
            .collect();
        AttentionMap {
            heads: attn.heads,
            layers: attn.layers,
            values,
        }
    };
    (map(gold), map(3 - gold))
}

pub fn attention_maps(model: &Model, enc: &EncodedSchema, gold: Role) -> Result<(AttentionMap, AttentionMap)> {
    let out = model.forward(&enc.ids, &vec![true; enc.len()])?;
    Ok(maps_from_tensor(&out.attention, enc, gold))
}

/// Shannon entropy of the normalized map in nats; `(0, true)` when the map
/// carries no mass.
pub fn entropy(map: &AttentionMap) -> (f64, bool) {
    let total: f64 = map.values.iter().sum();
    if !(total > 0.0) {
        return (0.0, true);
    }
    let h = map
        .values
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let q = v / total;
            -q * q.ln()
        })
        .sum();
    (h, false)
}

/// Dataset-level attention statistics. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub dataset: String,
    pub samples: usize,
    pub k: usize,
    pub accuracy: f64,
    pub ties: usize,
    /// Mean `|H(A_r) - H(A_w)|`.
    pub entropy_gap_full: f64,
    pub entropy_gap_last_k: f64,
    /// Mean `|mean(A_r) - mean(A_w)|`.
    pub mean_gap_full: f64,
    pub mean_gap_last_k: f64,
    pub entropy_right_full: f64,
    pub entropy_wrong_full: f64,
    pub entropy_right_last_k: f64,
    pub entropy_wrong_last_k: f64,
    /// Maps that carried no mass.
    pub degenerate_maps: usize,
}

pub const CSV_HEADER: &str = "dataset,samples,k,accuracy,ties,entropy_gap_full,entropy_gap_last_k,mean_gap_full,\
mean_gap_last_k,entropy_right_full,entropy_wrong_full,entropy_right_last_k,entropy_wrong_last_k,degenerate_maps";

pub fn analyze(model: &Model, set: &LabeledSet, k: usize) -> Result<AnalysisReport> {
    let layers = model.config.layers;
    if k == 0 || k > layers {
        return Err(Error::Contract(format!("k = {k} outside [1, {layers}]")));
    }
    if set.items.is_empty() {
        return Err(Error::Evaluation(format!("no labeled schemas to analyze in {}", set.name)));
    }
    let mut sums = [0.0; 8];
    let (mut correct, mut ties, mut degenerate) = (0, 0, 0);
    for item in &set.items {
        let p = predict(model, &item.enc)?;
        correct += usize::from(p.role == item.gold);
        ties += usize::from(p.tie);
        let (r, w) = attention_maps(model, &item.enc, item.gold)?;
        let (rk, wk) = (r.last_layers(k), w.last_layers(k));
        let ents = [&r, &w, &rk, &wk].map(|m| {
            let (h, d) = entropy(m);
            degenerate += usize::from(d);
            h
        });
        let stats = [
            (ents[0] - ents[1]).abs(),
            (ents[2] - ents[3]).abs(),
            (r.mean() - w.mean()).abs(),
            (rk.mean() - wk.mean()).abs(),
            ents[0],
            ents[1],
            ents[2],
            ents[3],
        ];
        for (s, v) in sums.iter_mut().zip(stats) {
            *s += v;
        }
    }
    let n = set.items.len() as f64;
    let m = sums.map(|s| s / n);
    Ok(AnalysisReport {
        dataset: set.name.clone(),
        samples: set.items.len(),
        k,
        accuracy: correct as f64 / n,
        ties,
        entropy_gap_full: m[0],
        entropy_gap_last_k: m[1],
        mean_gap_full: m[2],
        mean_gap_last_k: m[3],
        entropy_right_full: m[4],
        entropy_wrong_full: m[5],
        entropy_right_last_k: m[6],
        entropy_wrong_last_k: m[7],
        degenerate_maps: degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!("unknown report format {other:?}, expected json or csv"))),
        }
    }
}

pub fn render_report(report: &AnalysisReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.serialize(report).map_err(|e| Error::Evaluation(e.to_string()))?;
            let bytes = w.into_inner().map_err(|e| Error::Evaluation(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
        }
    }
}

pub fn parse_report(text: &str, format: ReportFormat) -> Result<AnalysisReport> {
    let bad = |e: String| Error::Parse {
        path: "report".into(),
        detail: e,
    };
    match format {
        ReportFormat::Json => serde_json::from_str(text).map_err(|e| bad(e.to_string())),
        ReportFormat::Csv => csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .next()
            .ok_or_else(|| bad("empty CSV report".into()))?
            .map_err(|e| bad(e.to_string())),
    }
}

pub fn emit_report(report: &AnalysisReport, format: ReportFormat, path: &Path) -> Result<()> {
    std::fs::write(path, render_report(report, format)?).map_err(|e| Error::io(path, e))
}
