#![allow(dead_code)]

use attn_contrast::autodiff::Tape;
use attn_contrast::data::{Corpus, TwinPair, WinogradSchema};
use attn_contrast::losses::{total_loss, EncodedPair, LossConfig};
use attn_contrast::model::{Model, ModelConfig};
use attn_contrast::tensor::Tensor;
use attn_contrast::tokenizer::{encode_masked, Vocab};

pub const WORDS: [&str; 6] = ["cat", "dog", "saw", "big", "red", "ran"];

pub fn small_vocab() -> Vocab {
    Vocab::from_tokens(WORDS.map(String::from)).unwrap()
}

/// Schema whose pronoun is the first whole word "it".
pub fn schema(text: &str, c1: &str, c2: &str, gold: Option<u8>, id: &str) -> WinogradSchema {
    let at = text
        .match_indices("it")
        .map(|(i, _)| i)
        .find(|&i| {
            let b = text.as_bytes();
            (i == 0 || b[i - 1] == b' ') && (i + 2 == b.len() || b[i + 2] == b' ')
        })
        .expect("pronoun");
    WinogradSchema::new(text, at..at + 2, c1, c2, gold, id).unwrap()
}

/// Parameters fixed by a closed-form formula, mirrored by the offline
/// numpy oracle that produced the expected values in these tests.
pub fn formula_model(config: ModelConfig) -> Model {
    let params = config
        .layout()
        .into_iter()
        .enumerate()
        .map(|(ti, (name, shape))| {
            let n: usize = shape.iter().product();
            let t = ti as f64;
            let data = (0..n)
                .map(|i| {
                    let i = i as f64;
                    if name.ends_with(".gain") {
                        1.0 + 0.1 * (0.9 * i + t).cos()
                    } else if shape.len() == 1 {
                        0.05 * (1.1 * i + 0.3 * t).sin()
                    } else {
                        0.4 * (0.37 * i + 0.61 * t + 0.2).sin()
                    }
                })
                .collect();
            Tensor::new(shape, data).unwrap()
        })
        .collect();
    Model::from_params(config, params).unwrap()
}

pub fn frozen_model() -> Model {
    formula_model(ModelConfig {
        layers: 1,
        heads: 2,
        d_model: 4,
        d_ff: 8,
        max_len: 12,
        vocab_size: small_vocab().len(),
        seed: 0,
    })
}

/// L=2, H=2, d_model=16, context 8.
pub fn gradcheck_config(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 16,
        d_ff: 32,
        max_len: 8,
        vocab_size: small_vocab().len(),
        seed,
    }
}

/// A twin pair that fits a context of 8 after substitution.
pub fn short_pair() -> TwinPair {
    TwinPair::new(
        schema("cat saw dog so it ran", "cat", "dog", Some(1), "p"),
        schema("cat saw dog so it saw", "cat", "dog", Some(2), "p"),
    )
    .unwrap()
}

pub fn encode(pair: &TwinPair, vocab: &Vocab, max_len: usize) -> EncodedPair {
    EncodedPair {
        first: encode_masked(&pair.first, vocab, max_len).unwrap(),
        second: encode_masked(&pair.second, vocab, max_len).unwrap(),
    }
}

pub fn loss_value(model: &Model, pair: &EncodedPair, cfg: &LossConfig) -> f64 {
    let tape = Tape::new();
    let p = model.bind(&tape, false);
    total_loss(&tape, model, &p, pair, cfg).unwrap().0.item()
}

pub fn loss_gradients(model: &Model, pair: &EncodedPair, cfg: &LossConfig) -> Vec<Tensor> {
    let tape = Tape::new();
    let p = model.bind(&tape, true);
    let (l, _) = total_loss(&tape, model, &p, pair, cfg).unwrap();
    let g = tape.backward(l).unwrap();
    p.iter().map(|v| g.get_or_zeros(*v)).collect()
}

/// Smallest gradient magnitude a central difference at `step` resolves to
/// relative accuracy `tol` when the function value is about `value`.
pub fn roundoff_floor(value: f64, step: f64, tol: f64) -> f64 {
    (f64::EPSILON * value.abs() / (step * tol)).max(1e-8)
}

/// Worst relative error of `analytic` against central differences of `f`
/// over every parameter entry. Denominators are floored at the roundoff
/// resolution of the difference quotient, where `scale` bounds the
/// magnitude of the terms summed into `f`.
pub fn worst_fd_error(
    model: &Model,
    analytic: &[Tensor],
    step: f64,
    tol: f64,
    scale: f64,
    f: impl Fn(&Model) -> f64,
) -> (f64, String) {
    let floor = roundoff_floor(scale, step, tol);
    let mut probe = model.clone();
    let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
    let mut worst = (0.0, String::new());
    for (pi, name) in names.iter().enumerate() {
        for j in 0..model.params()[pi].len() {
            let orig = model.params()[pi].data()[j];
            probe.params_mut()[pi].data_mut()[j] = orig + step;
            let up = f(&probe);
            probe.params_mut()[pi].data_mut()[j] = orig - step;
            let down = f(&probe);
            probe.params_mut()[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[pi].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{j}] analytic {a:e} numeric {numeric:e}"));
            }
        }
    }
    worst
}

pub fn corpus_of(pairs: Vec<TwinPair>) -> Corpus {
    let mut c = Corpus::new("fixture");
    c.pairs = pairs;
    c
}
