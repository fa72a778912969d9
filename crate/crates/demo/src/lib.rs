//! wasm-bindgen exports for the static page in `www/`.
//!
//! Each export returns plain numbers or a JSON string so the page needs no
//! generated TypeScript types.

use attn_contrast::data::{generate_synthetic, write_dpr, SynthSpec, WinogradSchema};
use attn_contrast::eval::maps_from_tensor;
use attn_contrast::losses::{ca_loss_value, candidate_likelihoods, CaForm, CandidateAttention, LossConfig};
use attn_contrast::model::{Model, ModelConfig};
use attn_contrast::tokenizer::{encode_masked, tokenize, Vocab};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// CA loss of one head over a `steps × steps` grid: row `i` is the first
/// twin's `a₁ = i/(steps-1)`, column `j` the second twin's.
#[wasm_bindgen]
pub fn loss_surface(form: &str, lambda: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    if steps < 2 {
        return Err(js("steps must be at least 2"));
    }
    let cfg = LossConfig {
        lambda,
        form: form.parse::<CaForm>().map_err(js)?,
        ..LossConfig::default()
    };
    let at = |i: usize| CandidateAttention::from_values(vec![i as f64 / (steps - 1) as f64], 1);
    let mut out = Vec::with_capacity(steps * steps);
    for i in 0..steps {
        for j in 0..steps {
            out.push(ca_loss_value(&at(i), &at(j), &cfg).map_err(js)?);
        }
    }
    Ok(out)
}

/// Runs a freshly initialized model over `sentence` with the pronoun masked.
/// Returns JSON with the tokens, the MASK-row attention mass on each
/// candidate per layer and head, and the two candidate likelihoods.
#[wasm_bindgen]
pub fn inspect_sentence(
    sentence: &str,
    pronoun: &str,
    first: &str,
    second: &str,
    layers: usize,
    heads: usize,
    seed: u64,
) -> Result<String, JsError> {
    let schema = WinogradSchema::with_pronoun(sentence, pronoun, first, second, None, "demo").map_err(js)?;
    let mut words: Vec<String> = tokenize(sentence).into_iter().map(|(t, _)| t).collect();
    words.sort();
    words.dedup();
    let vocab = Vocab::from_tokens(words).map_err(js)?;
    let config = ModelConfig {
        layers,
        heads,
        d_model: 8 * heads,
        d_ff: 32 * heads,
        max_len: 64,
        vocab_size: vocab.len(),
        seed,
    };
    let model = Model::init(config).map_err(js)?;
    let enc = encode_masked(&schema, &vocab, config.max_len).map_err(js)?;
    let out = model.forward(&enc.ids, &vec![true; enc.len()]).map_err(js)?;
    let (a1, a2) = maps_from_tensor(&out.attention, &enc, 1);
    let p = candidate_likelihoods(&model, &enc).map_err(js)?;
    let tokens: Vec<String> = enc.ids.iter().map(|&i| vocab.decode(&[i])).collect();
    Ok(json!({
        "tokens": tokens,
        "mask": enc.mask_pos,
        "spans": [[enc.spans[0].start, enc.spans[0].end], [enc.spans[1].start, enc.spans[1].end]],
        "layers": layers,
        "heads": heads,
        "first": a1.values,
        "second": a2.values,
        "likelihoods": p,
    })
    .to_string())
}

/// `pairs` synthetic twin pairs in the DPR text format.
#[wasm_bindgen]
pub fn synthetic_sample(seed: u64, pairs: usize) -> Result<String, JsError> {
    let spec = SynthSpec {
        pairs: Some(pairs),
        ..SynthSpec::default()
    };
    Ok(write_dpr(&generate_synthetic(&spec, seed).map_err(js)?))
}
