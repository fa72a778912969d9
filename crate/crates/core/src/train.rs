//! Self-supervised training over twin pairs with Adam.
//!
//! Gold labels are stripped when pairs are encoded: the loss path only ever
//! sees [`EncodedPair`], which has no label field.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::eval::{accuracy, LabeledSet};
use crate::losses::{total_loss, EncodedPair, LossConfig};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::tokenizer::{encode_masked, Vocab};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Starting from a trained checkpoint: lr 1e-5, no clipping.
    FineTune,
    /// Starting from random init: lr 3e-4, clip at norm 1.
    FromScratch,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine-tune" => Ok(Mode::FineTune),
            "from-scratch" => Ok(Mode::FromScratch),
            other => Err(Error::Config(format!("unknown mode {other:?}, expected fine-tune or from-scratch"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::FineTune => "fine-tune",
            Mode::FromScratch => "from-scratch",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_pairs: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs.
    pub checkpoint_every: Option<usize>,
    pub grad_clip: Option<f64>,
    pub mode: Mode,
}

impl TrainConfig {
    pub fn for_mode(mode: Mode) -> Self {
        let (lr, grad_clip) = match mode {
            Mode::FineTune => (1e-5, None),
            Mode::FromScratch => (3e-4, Some(1.0)),
        };
        TrainConfig {
            epochs: 22,
            batch_pairs: 18,
            lr,
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_every: None,
            grad_clip,
            mode,
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.batch_pairs == 0 {
            return Err(Error::Config("batch_pairs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) || self.checkpoint_every == Some(0) {
            return Err(Error::Config("grad_clip and checkpoint_every must be positive when set".into()));
        }
        self.loss.validate(layers)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_mode(Mode::FineTune)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam. Nothing is updated if any gradient is non-finite.
pub fn adam_step(model: &mut Model, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != model.params().len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            model.params().len()
        )));
    }
    for ((name, p), g) in model.named().into_iter().zip(grads) {
        if g.shape() != p.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        let (m, v, g) = (state.m[i].data_mut(), state.v[i].data_mut(), grads[i].data());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Encodes every pair, dropping labels. Returns the pairs and the twin ids
/// of pairs that failed to encode.
pub fn encode_pairs(corpus: &Corpus, vocab: &Vocab, max_len: usize) -> (Vec<EncodedPair>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for p in &corpus.pairs {
        let enc = |s| encode_masked(s, vocab, max_len);
        match (enc(&p.first), enc(&p.second)) {
            (Ok(first), Ok(second)) => pairs.push(EncodedPair { first, second }),
            (Err(e), _) | (_, Err(e)) => {
                log::warn!("skipping pair {}: {e}", p.first.twin_id);
                skipped.push(p.first.twin_id.clone());
            }
        }
    }
    (pairs, skipped)
}

/// Loss and gradient of a batch, summed over its pairs in order.
pub struct BatchResult {
    pub loss: f64,
    pub ca: f64,
    pub cm: f64,
    pub degenerate_heads: usize,
    pub margin_sum: f64,
    pub grads: Vec<Tensor>,
}

pub fn batch_gradient(model: &Model, batch: &[&EncodedPair], loss: &LossConfig) -> Result<BatchResult> {
    let mut acc: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut out = BatchResult {
        loss: 0.0,
        ca: 0.0,
        cm: 0.0,
        degenerate_heads: 0,
        margin_sum: 0.0,
        grads: Vec::new(),
    };
    for pair in batch {
        let tape = Tape::new();
        let p = model.bind(&tape, true);
        let (l, diag) = total_loss(&tape, model, &p, pair, loss)?;
        let grads = tape.backward(l)?;
        for (a, v) in acc.iter_mut().zip(&p) {
            if let Some(g) = grads.get(*v) {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
        }
        out.loss += diag.total;
        out.ca += diag.ca;
        out.cm += diag.cm;
        out.degenerate_heads += diag.degenerate_heads;
        out.margin_sum += diag.margins.map_or(0.0, |m| m[0] + m[1]);
    }
    out.grads = acc;
    Ok(out)
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: u64,
    pub pairs: usize,
    /// Mean per pair.
    pub loss: f64,
    pub ca: f64,
    pub cm: f64,
    pub degenerate_heads: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub pairs: usize,
    /// Means per pair.
    pub loss: f64,
    pub ca: f64,
    pub cm: f64,
    /// Population variance of the per-step mean losses.
    pub loss_variance: f64,
    pub degenerate_heads: usize,
    /// Mean `|p1 - p2|` per sentence; 0 when CM is disabled.
    pub margin: f64,
    pub eval_accuracy: Option<f64>,
}

/// One pass over `pairs` in an order fixed by `(seed, epoch)`.
pub fn train_epoch(
    model: &mut Model,
    pairs: &[EncodedPair],
    cfg: &TrainConfig,
    state: &mut AdamState,
    epoch: usize,
) -> Result<(EpochMetrics, Vec<StepMetrics>)> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);

    let mut steps = Vec::new();
    let (mut loss, mut ca, mut cm, mut margin, mut degenerate) = (0.0, 0.0, 0.0, 0.0, 0);
    for chunk in order.chunks(cfg.batch_pairs) {
        let batch: Vec<&EncodedPair> = chunk.iter().map(|&i| &pairs[i]).collect();
        let mut r = batch_gradient(model, &batch, &cfg.loss)?;
        let norm = global_norm(&r.grads);
        if let Some(clip) = cfg.grad_clip {
            if norm > clip {
                let s = clip / norm;
                for g in &mut r.grads {
                    g.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        adam_step(model, &r.grads, state, cfg.lr)?;
        let n = batch.len() as f64;
        steps.push(StepMetrics {
            epoch,
            step: state.step,
            pairs: batch.len(),
            loss: r.loss / n,
            ca: r.ca / n,
            cm: r.cm / n,
            degenerate_heads: r.degenerate_heads,
            grad_norm: norm,
        });
        loss += r.loss;
        ca += r.ca;
        cm += r.cm;
        margin += r.margin_sum;
        degenerate += r.degenerate_heads;
    }
    let n = pairs.len().max(1) as f64;
    let step_mean = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len().max(1) as f64;
    let variance = steps.iter().map(|s| (s.loss - step_mean).powi(2)).sum::<f64>() / steps.len().max(1) as f64;
    let metrics = EpochMetrics {
        epoch,
        steps: steps.len(),
        pairs: pairs.len(),
        loss: loss / n,
        ca: ca / n,
        cm: cm / n,
        loss_variance: variance,
        degenerate_heads: degenerate,
        margin: margin / (2.0 * n),
        eval_accuracy: None,
    };
    Ok((metrics, steps))
}

/// Where a run writes its checkpoints and metrics log.
pub struct RunOutputs<'a> {
    pub dir: &'a Path,
    pub vocab: &'a Vocab,
    /// Written as the first log record, so the run is replayable from the log.
    pub header: serde_json::Value,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochMetrics>,
}

fn record(kind: &str, body: impl Serialize) -> String {
    let mut v = serde_json::to_value(body).expect("metrics serialize");
    if let Some(obj) = v.as_object_mut() {
        obj.insert("record".into(), kind.into());
    } else {
        v = serde_json::json!({ "record": kind, "value": v });
    }
    v.to_string()
}

pub fn run_training(
    cfg: &TrainConfig,
    mut model: Model,
    pairs: &[EncodedPair],
    eval: Option<&LabeledSet>,
    out: Option<&RunOutputs<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate(model.config.layers)?;
    let mut log = match out {
        Some(o) => {
            std::fs::create_dir_all(o.dir).map_err(|e| Error::io(o.dir, e))?;
            let path = o.dir.join(METRICS_FILE);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(w, "{}", record("config", &o.header)).map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };
    let mut state = AdamState::new(&model);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut m, steps) = train_epoch(&mut model, pairs, cfg, &mut state, epoch)?;
        if let Some(set) = eval {
            m.eval_accuracy = Some(accuracy(&model, set)?.accuracy);
        }
        log::info!("epoch {epoch}: loss {:.6} ca {:.6} cm {:.6}", m.loss, m.ca, m.cm);
        if let (Some((w, path)), Some(o)) = (log.as_mut(), out) {
            for s in &steps {
                writeln!(w, "{}", record("step", s)).map_err(|e| Error::io(&*path, e))?;
            }
            writeln!(w, "{}", record("epoch", &m)).map_err(|e| Error::io(&*path, e))?;
            if cfg.checkpoint_every.is_some_and(|n| (epoch + 1) % n == 0) {
                checkpoint::save(&o.dir.join(format!("epoch-{}.ckpt", epoch + 1)), &model, o.vocab)?;
            }
        }
        epochs.push(m);
    }
    if let (Some((mut w, path)), Some(o)) = (log, out) {
        w.flush().map_err(|e| Error::io(&path, e))?;
        checkpoint::save(&o.dir.join(FINAL_CHECKPOINT), &model, o.vocab)?;
    }
    Ok(TrainOutcome { model, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Model {
        Model::init(ModelConfig {
            layers: 1,
            heads: 1,
            d_model: 2,
            d_ff: 2,
            max_len: 4,
            vocab_size: 6,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut m = tiny();
        let before = m.clone();
        let mut s = AdamState::new(&m);
        let zeros: Vec<Tensor> = m.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        adam_step(&mut m, &zeros, &mut s, 0.1).unwrap();
        assert_eq!(m, before);
        assert!(s.m.iter().chain(&s.v).all(|t| t.data().iter().all(|&x| x == 0.0)));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut m = tiny();
        let before = m.clone();
        let mut s = AdamState::new(&m);
        let grads: Vec<Tensor> = m
            .params()
            .iter()
            .map(|p| Tensor::full(p.shape(), -0.3))
            .collect();
        adam_step(&mut m, &grads, &mut s, 0.01).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        let want = 0.01 * 0.3 / (0.3 + ADAM_EPS);
        let (a, b) = (m.params()[0].data()[0], before.params()[0].data()[0]);
        assert!((a - b - want).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut m = tiny();
        let mut s = AdamState::new(&m);
        let mut grads: Vec<Tensor> = m.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        grads[2].data_mut()[0] = f64::NAN;
        let err = adam_step(&mut m, &grads, &mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains("layer0.ln1.gain"), "{err}");
        assert_eq!(s.step, 0);
    }

    #[test]
    fn mode_defaults() {
        let f = TrainConfig::for_mode(Mode::FineTune);
        assert_eq!((f.epochs, f.batch_pairs, f.lr, f.grad_clip), (22, 18, 1e-5, None));
        let s = TrainConfig::for_mode(Mode::FromScratch);
        assert_eq!((s.lr, s.grad_clip), (3e-4, Some(1.0)));
    }

    #[test]
    fn empty_corpus_epoch_is_noop() {
        let mut m = tiny();
        let before = m.clone();
        let mut s = AdamState::new(&m);
        let cfg = TrainConfig {
            loss: LossConfig { k: 1, ..Default::default() },
            ..TrainConfig::default()
        };
        let (metrics, steps) = train_epoch(&mut m, &[], &cfg, &mut s, 0).unwrap();
        assert!(steps.is_empty() && metrics.steps == 0);
        assert_eq!(m, before);
    }
}
