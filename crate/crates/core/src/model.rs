//! Pre-norm Transformer encoder with a tied masked-token head.
//!
//! Attention is returned for every layer as `[heads, query, key]`, so the
//! full tensor is indexed `[layer][head][query][key]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;
const PER_LAYER: usize = 16;
const LAYER_PARAMS: [&str; PER_LAYER] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// L=3, H=4, d_model=64, d_ff=256, max_len=64.
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            layers: 3,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            max_len: 64,
            vocab_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.layers, self.heads, self.d_model, self.d_ff, self.max_len, self.vocab_size];
        if counts.contains(&0) {
            return Err(Error::Config(format!("model sizes must be positive: {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Names and shapes of every parameter in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            ("embed.tokens".to_string(), vec![v, d]),
            ("embed.positions".to_string(), vec![self.max_len, d]),
        ];
        for l in 0..self.layers {
            let shapes: [Vec<usize>; PER_LAYER] = [
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
            ];
            for (name, shape) in LAYER_PARAMS.iter().zip(shapes) {
                out.push((format!("layer{l}.{name}"), shape));
            }
        }
        out.push(("final_ln.gain".into(), vec![d]));
        out.push(("final_ln.bias".into(), vec![d]));
        out.push(("head.bias".into(), vec![v]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<Tensor>,
}

/// Attention probabilities `[layer][head][query][key]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTensor {
    pub layers: usize,
    pub heads: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl AttentionTensor {
    pub fn at(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        let t = self.len;
        self.data[((layer * self.heads + head) * t + query) * t + key]
    }

    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f64] {
        let t = self.len;
        let start = ((layer * self.heads + head) * t + query) * t;
        &self.data[start..start + t]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `[len, vocab]`
    pub logits: Tensor,
    pub attention: AttentionTensor,
}

/// Forward results still attached to a tape.
pub struct TapeForward<'t> {
    /// `[rows, vocab]` for the requested rows, `None` when none were asked for.
    pub logits: Option<Var<'t>>,
    /// One `[heads, len, len]` variable per layer.
    pub attention: Vec<Var<'t>>,
}

impl<'t> TapeForward<'t> {
    pub fn attention_tensor(&self) -> AttentionTensor {
        let first = self.attention[0].shape();
        AttentionTensor {
            layers: self.attention.len(),
            heads: first[0],
            len: first[1],
            data: self.attention.iter().flat_map(|a| a.value().data().to_vec()).collect(),
        }
    }
}

impl Model {
    /// N(0, 0.02) weights and embeddings, unit layer-norm gains, zero biases.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".gain") {
                    vec![1.0; n]
                } else if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Tensor::new(shape, data).expect("layout shape")
            })
            .collect();
        Ok(Model { config, params })
    }

    /// Rebuilds a model from tensors in layout order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "model parameter",
                    left: shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        Ok(Model { config, params })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.config
            .layout()
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.params)
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.config.layout().iter().position(|(n, _)| n == name)?;
        Some(&mut self.params[i])
    }

    /// Puts every parameter on `tape`, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone().with_grad(true))
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn check_input(&self, ids: &[u32], valid: &[bool]) -> Result<()> {
        let c = &self.config;
        if ids.is_empty() || ids.len() > c.max_len {
            return Err(Error::Length {
                len: ids.len(),
                max: c.max_len,
            });
        }
        if valid.len() != ids.len() {
            return Err(Error::Contract(format!(
                "{} validity flags for {} tokens",
                valid.len(),
                ids.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= c.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }
        Ok(())
    }

    /// Runs the encoder on bound parameters. Logits are produced only for
    /// `logit_rows`, which keeps scoring passes cheap.
    pub fn run<'t>(&self, p: &[Var<'t>], ids: &[u32], valid: &[bool], logit_rows: &[usize]) -> Result<TapeForward<'t>> {
        self.check_input(ids, valid)?;
        let c = &self.config;
        let (t, h, dh) = (ids.len(), c.heads, c.head_dim());
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let mut x = p[0].gather_rows(&ids)?.add(p[1].gather_rows(&positions)?)?;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut attention = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let w = &p[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let a = x.layer_norm(w[0], w[1], LN_EPS)?;
            let heads = |proj: Var<'t>, bias: Var<'t>, axes: &[usize]| -> Result<Var<'t>> {
                a.matmul(proj)?.add(bias)?.reshape(&[t, h, dh])?.permute(axes)
            };
            let q = heads(w[2], w[3], &[1, 0, 2])?;
            let k_t = heads(w[4], w[5], &[1, 2, 0])?;
            let v = heads(w[6], w[7], &[1, 0, 2])?;
            let probs = q.matmul(k_t)?.scale(inv_sqrt).masked_softmax(valid)?;
            let ctx = probs.matmul(v)?.permute(&[1, 0, 2])?.reshape(&[t, c.d_model])?;
            x = x.add(ctx.matmul(w[8])?.add(w[9])?)?;
            let b = x.layer_norm(w[10], w[11], LN_EPS)?;
            let ff = b.matmul(w[12])?.add(w[13])?.gelu().matmul(w[14])?.add(w[15])?;
            x = x.add(ff)?;
            attention.push(probs);
        }
        let logits = if logit_rows.is_empty() {
            None
        } else {
            let f = 2 + c.layers * PER_LAYER;
            let rows = x.gather_rows(logit_rows)?.layer_norm(p[f], p[f + 1], LN_EPS)?;
            Some(rows.matmul(p[0].transpose()?)?.add(p[f + 2])?)
        };
        Ok(TapeForward { logits, attention })
    }

    /// Gradient-free forward pass over the whole sequence.
    pub fn forward(&self, ids: &[u32], valid: &[bool]) -> Result<ForwardOutput> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let rows: Vec<usize> = (0..ids.len()).collect();
        let out = self.run(&p, ids, valid, &rows)?;
        Ok(ForwardOutput {
            logits: out.logits.expect("rows requested").to_tensor(),
            attention: out.attention_tensor(),
        })
    }
}
