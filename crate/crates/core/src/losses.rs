//! Candidate scoring, candidate attention, and the contrastive attention
//! (CA) and contrastive margin (CM) objectives.
//!
//! Candidate attention for one sentence reads the MASK row of the last `k`
//! layers, sums it over each candidate's tokens, and normalizes the two
//! sums per head. Heads are laid out layer-major, so
//! `m = (layer - (L - k)) * H + head`.
//!
//! CA comes in two forms. With `x = a_i,j`, `y = a_i+1,j` (per head `m`) and
//! `B = (x - ½)² + (y - ½)²`, `E = 1 - (x - y)²`,
//! `E' = 1 - ((1 - x) - (1 - y))²`, both sum over `j ∈ {1, 2}` and `m`:
//!
//! * [`CaForm::Coherent`]: `-λB + E + E'`. Its minima are exactly the
//!   binarized configurations that flip between the twins.
//! * [`CaForm::Literal`]: `-λ(B + E + E')`, the sign applied to every term.
//!
//! CM is `-α Σ_i max(0, |p_i,1 - p_i,2| + β)`. For `β > 0` the clamp never
//! binds; it only has an effect for a negative `β`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{AttentionTensor, Model};
use crate::tensor::Tensor;
use crate::tokenizer::{substitute_candidate, EncodedSchema};

/// Candidate mass below this at a head counts as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaForm {
    Coherent,
    Literal,
}

impl std::str::FromStr for CaForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coherent" => Ok(CaForm::Coherent),
            "literal" => Ok(CaForm::Literal),
            other => Err(Error::Config(format!("unknown CA form {other:?}, expected coherent or literal"))),
        }
    }
}

impl std::fmt::Display for CaForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CaForm::Coherent => "coherent",
            CaForm::Literal => "literal",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Number of final layers feeding CA.
    pub k: usize,
    pub form: CaForm,
    pub enable_ca: bool,
    pub enable_cm: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            alpha: 0.05,
            beta: 0.02,
            k: 3,
            form: CaForm::Coherent,
            enable_ca: true,
            enable_cm: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.alpha >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "lambda and alpha must be non-negative, beta finite (got {}, {}, {})",
                self.lambda, self.alpha, self.beta
            )));
        }
        if self.k == 0 || self.k > layers {
            return Err(Error::Config(format!("k = {} outside [1, {layers}]", self.k)));
        }
        if !self.enable_ca && !self.enable_cm {
            return Err(Error::Config("both CA and CM are disabled".into()));
        }
        Ok(())
    }
}

/// Normalized candidate attention still on a tape; each vector has `k·H` entries.
#[derive(Clone, Copy, Debug)]
pub struct CandidateAttentionVars<'t> {
    pub a1: Var<'t>,
    pub a2: Var<'t>,
    pub k: usize,
    pub degenerate: usize,
}

/// Detached candidate attention.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateAttention {
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub k: usize,
    pub degenerate: usize,
}

impl CandidateAttention {
    pub fn from_tensor(attn: &AttentionTensor, mask_pos: usize, spans: &[Range<usize>; 2], k: usize) -> Result<Self> {
        let tape = Tape::new();
        let t = attn.len;
        let per_layer = attn.heads * t * t;
        let layers: Vec<Var<'_>> = (0..attn.layers)
            .map(|l| {
                let data = attn.data[l * per_layer..(l + 1) * per_layer].to_vec();
                tape.constant(Tensor::new(vec![attn.heads, t, t], data).expect("attention layout"))
            })
            .collect();
        let v = slice_candidate_attention(&tape, &layers, mask_pos, spans, k)?;
        Ok(v.detach())
    }

    /// Builds a value directly from normalized vectors (tests, loss surfaces).
    pub fn from_values(a1: Vec<f64>, k: usize) -> Self {
        let a2 = a1.iter().map(|x| 1.0 - x).collect();
        CandidateAttention {
            a1,
            a2,
            k,
            degenerate: 0,
        }
    }

    pub fn swapped(&self) -> Self {
        CandidateAttention {
            a1: self.a2.clone(),
            a2: self.a1.clone(),
            ..self.clone()
        }
    }

    fn on<'t>(&self, tape: &'t Tape) -> CandidateAttentionVars<'t> {
        CandidateAttentionVars {
            a1: tape.constant(Tensor::vector(self.a1.clone())),
            a2: tape.constant(Tensor::vector(self.a2.clone())),
            k: self.k,
            degenerate: self.degenerate,
        }
    }
}

impl CandidateAttentionVars<'_> {
    pub fn detach(&self) -> CandidateAttention {
        CandidateAttention {
            a1: self.a1.value().data().to_vec(),
            a2: self.a2.value().data().to_vec(),
            k: self.k,
            degenerate: self.degenerate,
        }
    }
}

/// Sums the MASK row over each candidate span in the last `k` layers and
/// normalizes the two sums per head. A head whose two sums add up to less
/// than [`DEGENERATE_EPS`] is set to `(½, ½)`, passes no gradient, and is
/// counted in `degenerate`.
pub fn slice_candidate_attention<'t>(
    tape: &'t Tape,
    attention: &[Var<'t>],
    mask_pos: usize,
    spans: &[Range<usize>; 2],
    k: usize,
) -> Result<CandidateAttentionVars<'t>> {
    let layers = attention.len();
    if k == 0 || k > layers {
        return Err(Error::Contract(format!("k = {k} outside [1, {layers}]")));
    }
    let shape = attention[0].shape();
    let (heads, t) = (shape[0], shape[1]);
    for s in spans {
        if s.is_empty() || s.end > t || s.contains(&mask_pos) {
            return Err(Error::Contract(format!("invalid candidate span {s:?} for length {t}, mask {mask_pos}")));
        }
    }
    if mask_pos >= t || spans[0].start < spans[1].end && spans[1].start < spans[0].end {
        return Err(Error::Contract("candidate spans overlap or mask out of range".into()));
    }
    let raw = |span: &Range<usize>| -> Result<Var<'t>> {
        let mut parts = Vec::with_capacity(k);
        for a in &attention[layers - k..] {
            let idx: Vec<usize> = (0..heads)
                .flat_map(|h| span.clone().map(move |j| (h * t + mask_pos) * t + j))
                .collect();
            parts.push(a.pick(&idx)?.reshape(&[heads, span.len()])?.sum_axis(1)?);
        }
        Ok(tape.concat(&parts))
    };
    let r1 = raw(&spans[0])?;
    let r2 = raw(&spans[1])?;
    let total = r1.add(r2)?;
    let dead: Vec<bool> = total.value().data().iter().map(|&s| s < DEGENERATE_EPS).collect();
    let safe = total.fill(&dead, 1.0)?;
    Ok(CandidateAttentionVars {
        a1: r1.div(safe)?.fill(&dead, 0.5)?,
        a2: r2.div(safe)?.fill(&dead, 0.5)?,
        k,
        degenerate: dead.iter().filter(|&&d| d).count(),
    })
}

/// CA over one twin pair, in the configured form.
pub fn ca_loss<'t>(
    first: &CandidateAttentionVars<'t>,
    second: &CandidateAttentionVars<'t>,
    cfg: &LossConfig,
) -> Result<Var<'t>> {
    if first.k != second.k {
        return Err(Error::Contract(format!("twins sliced with k = {} and k = {}", first.k, second.k)));
    }
    let mut terms = Vec::with_capacity(2);
    for (x, y) in [(first.a1, second.a1), (first.a2, second.a2)] {
        let binar = x.offset(-0.5).square().add(y.offset(-0.5).square())?;
        let mex = x.sub(y)?.square().scale(-1.0).offset(1.0);
        let mex2 = x.scale(-1.0).offset(1.0).sub(y.scale(-1.0).offset(1.0))?.square().scale(-1.0).offset(1.0);
        let mex = mex.add(mex2)?;
        let per_head = match cfg.form {
            CaForm::Coherent => binar.scale(-cfg.lambda).add(mex)?,
            CaForm::Literal => binar.add(mex)?.scale(-cfg.lambda),
        };
        terms.push(per_head.sum());
    }
    terms[0].add(terms[1])
}

pub fn ca_loss_value(first: &CandidateAttention, second: &CandidateAttention, cfg: &LossConfig) -> Result<f64> {
    let tape = Tape::new();
    Ok(ca_loss(&first.on(&tape), &second.on(&tape), cfg)?.item())
}

/// Normalized candidate likelihoods of one sentence, `p1 + p2 = 1`.
#[derive(Clone, Copy, Debug)]
pub struct LikelihoodVars<'t> {
    pub p1: Var<'t>,
    pub p2: Var<'t>,
}

impl LikelihoodVars<'_> {
    pub fn values(&self) -> [f64; 2] {
        [self.p1.item(), self.p2.item()]
    }
}

/// For each candidate: open its slot at the pronoun, take the mean
/// log-probability of its tokens there, exponentiate; then normalize the
/// two scores.
pub fn score_candidate_likelihood<'t>(model: &Model, p: &[Var<'t>], enc: &EncodedSchema) -> Result<LikelihoodVars<'t>> {
    let v = model.config.vocab_size;
    let mut raw = Vec::with_capacity(2);
    for role in [1, 2] {
        let sub = substitute_candidate(enc, role, model.config.max_len)?;
        let rows: Vec<usize> = sub.target_positions.clone().collect();
        let valid = vec![true; sub.ids.len()];
        let out = model.run(p, &sub.ids, &valid, &rows)?;
        let logp = out.logits.expect("rows requested").log_softmax();
        let picks: Vec<usize> = sub.targets.iter().enumerate().map(|(r, &id)| r * v + id as usize).collect();
        raw.push(logp.pick(&picks)?.mean().exp());
    }
    let total = raw[0].add(raw[1])?;
    Ok(LikelihoodVars {
        p1: raw[0].div(total)?,
        p2: raw[1].div(total)?,
    })
}

pub fn candidate_likelihoods(model: &Model, enc: &EncodedSchema) -> Result<[f64; 2]> {
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    Ok(score_candidate_likelihood(model, &p, enc)?.values())
}

/// CM over the given sentences.
pub fn cm_loss<'t>(tape: &'t Tape, rows: &[LikelihoodVars<'t>], cfg: &LossConfig) -> Result<Var<'t>> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for r in rows {
        let hinge = r.p1.sub(r.p2)?.abs().offset(cfg.beta).relu();
        total = total.add(hinge.sum())?;
    }
    Ok(total.scale(-cfg.alpha))
}

pub fn cm_loss_value(rows: &[[f64; 2]], cfg: &LossConfig) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<LikelihoodVars<'_>> = rows
        .iter()
        .map(|r| LikelihoodVars {
            p1: tape.constant(Tensor::scalar(r[0])),
            p2: tape.constant(Tensor::scalar(r[1])),
        })
        .collect();
    Ok(cm_loss(&tape, &vars, cfg)?.item())
}

/// Both encoded members of a twin pair. Gold labels never get this far.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub first: EncodedSchema,
    pub second: EncodedSchema,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub total: f64,
    pub ca: f64,
    pub cm: f64,
    pub degenerate_heads: usize,
    /// `|p1 - p2|` per twin, present when CM is enabled.
    pub margins: Option<[f64; 2]>,
}

/// Sum of the enabled terms for one pair.
pub fn total_loss<'t>(
    tape: &'t Tape,
    model: &Model,
    p: &[Var<'t>],
    pair: &EncodedPair,
    cfg: &LossConfig,
) -> Result<(Var<'t>, Diagnostics)> {
    cfg.validate(model.config.layers)?;
    let mut diag = Diagnostics::default();
    let mut total: Option<Var<'t>> = None;
    if cfg.enable_ca {
        let mut sliced = Vec::with_capacity(2);
        for enc in [&pair.first, &pair.second] {
            let out = model.run(p, &enc.ids, &vec![true; enc.len()], &[])?;
            let a = slice_candidate_attention(tape, &out.attention, enc.mask_pos, &enc.spans, cfg.k)?;
            diag.degenerate_heads += a.degenerate;
            sliced.push(a);
        }
        let ca = ca_loss(&sliced[0], &sliced[1], cfg)?;
        diag.ca = ca.item();
        total = Some(ca);
    }
    if cfg.enable_cm {
        let rows = [
            score_candidate_likelihood(model, p, &pair.first)?,
            score_candidate_likelihood(model, p, &pair.second)?,
        ];
        let [a, b] = rows.map(|r| r.values());
        diag.margins = Some([(a[0] - a[1]).abs(), (b[0] - b[1]).abs()]);
        let cm = cm_loss(tape, &rows, cfg)?;
        diag.cm = cm.item();
        total = Some(match total {
            Some(ca) => ca.add(cm)?,
            None => cm,
        });
    }
    let total = total.expect("validated: at least one term");
    diag.total = total.item();
    Ok((total, diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    fn m1(a: f64) -> CandidateAttention {
        CandidateAttention::from_values(vec![a], 1)
    }

    #[test]
    fn coherent_examples() {
        let c = cfg();
        assert!((ca_loss_value(&m1(1.0), &m1(0.0), &c).unwrap() - -1.0).abs() < 1e-12);
        assert!((ca_loss_value(&m1(0.5), &m1(0.5), &c).unwrap() - 4.0).abs() < 1e-12);
        assert!((ca_loss_value(&m1(1.0), &m1(1.0), &c).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn literal_applies_sign_to_every_term() {
        let c = LossConfig {
            form: CaForm::Literal,
            ..cfg()
        };
        assert!((ca_loss_value(&m1(1.0), &m1(0.0), &c).unwrap() - -1.0).abs() < 1e-12);
        assert!((ca_loss_value(&m1(0.5), &m1(0.5), &c).unwrap() - -4.0).abs() < 1e-12);
        // (¼ + ¼ + 1 + 1) per candidate, negated
        assert!((ca_loss_value(&m1(1.0), &m1(1.0), &c).unwrap() - -5.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_leaves_exclusivity_penalty() {
        let c = LossConfig { lambda: 0.0, ..cfg() };
        let (x, y) = (0.8, 0.3);
        let d: f64 = x - y;
        let want = 2.0 * 2.0 * (1.0 - d * d);
        assert!((ca_loss_value(&m1(x), &m1(y), &c).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn cm_examples() {
        let c = cfg();
        assert!((cm_loss_value(&[[0.9, 0.1]], &c).unwrap() - -0.041).abs() < 1e-12);
        assert!((cm_loss_value(&[[0.5, 0.5]], &c).unwrap() - -0.001).abs() < 1e-12);
        assert!((cm_loss_value(&[[1.0, 0.0], [0.0, 1.0]], &c).unwrap() - -0.102).abs() < 1e-12);
    }

    #[test]
    fn slicing_normalizes_and_flags_degenerate_heads() {
        // 1 layer, 2 heads, 4 tokens; mask at 0, spans 1..2 and 2..4
        let mut data = vec![0.0; 2 * 4 * 4];
        data[1] = 0.3;
        data[2] = 0.05;
        data[3] = 0.05;
        data[0] = 0.6;
        data[16] = 1.0; // head 1: all mass on the mask itself
        let attn = AttentionTensor {
            layers: 1,
            heads: 2,
            len: 4,
            data,
        };
        let a = CandidateAttention::from_tensor(&attn, 0, &[1..2, 2..4], 1).unwrap();
        assert!((a.a1[0] - 0.75).abs() < 1e-15 && (a.a2[0] - 0.25).abs() < 1e-15);
        assert_eq!((a.a1[1], a.a2[1]), (0.5, 0.5));
        assert_eq!(a.degenerate, 1);
        assert!(CandidateAttention::from_tensor(&attn, 0, &[1..2, 2..4], 2).is_err());
    }

    #[test]
    fn k_mismatch_is_contract_error() {
        let a = CandidateAttention::from_values(vec![0.5, 0.5], 2);
        let b = CandidateAttention::from_values(vec![0.5, 0.5], 1);
        assert!(matches!(ca_loss_value(&a, &b, &cfg()), Err(Error::Contract(_))));
    }

    #[test]
    fn both_terms_disabled_is_config_error() {
        let c = LossConfig {
            enable_ca: false,
            enable_cm: false,
            ..cfg()
        };
        assert!(matches!(c.validate(3), Err(Error::Config(_))));
        assert!(LossConfig { k: 4, ..cfg() }.validate(3).is_err());
    }
}
