//! Resolved run configuration: built-in defaults, then a key-value file,
//! then command-line flags.
//!
//! File format: one `key = value` per line, `#` comments, keys spelled as
//! the long flag names (`batch-pairs = 18`).

use std::path::{Path, PathBuf};

use attn_contrast::losses::{CaForm, LossConfig};
use attn_contrast::model::ModelConfig;
use attn_contrast::train::{Mode, TrainConfig};
use attn_contrast::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeChoice {
    /// Fine-tune when starting from a checkpoint, otherwise from scratch.
    Auto,
    Fixed(Mode),
}

impl std::fmt::Display for ModeChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModeChoice::Auto => f.write_str("auto"),
            ModeChoice::Fixed(m) => m.fmt(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub out: PathBuf,
    pub format: Option<String>,
    pub mode: ModeChoice,
    pub epochs: usize,
    pub batch_pairs: usize,
    /// `None` takes the mode default.
    pub lr: Option<f64>,
    pub grad_clip: Option<Option<f64>>,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    pub ca_form: CaForm,
    pub enable_ca: bool,
    pub enable_cm: bool,
    pub seed: u64,
    pub checkpoint_every: Option<usize>,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub min_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        let train = TrainConfig::default();
        let toy = ModelConfig::toy(0, 0);
        RunConfig {
            train: None,
            eval: None,
            init: None,
            out: PathBuf::from("run"),
            format: None,
            mode: ModeChoice::Auto,
            epochs: train.epochs,
            batch_pairs: train.batch_pairs,
            lr: None,
            grad_clip: None,
            lambda: loss.lambda,
            alpha: loss.alpha,
            beta: loss.beta,
            k: loss.k,
            ca_form: loss.form,
            enable_ca: loss.enable_ca,
            enable_cm: loss.enable_cm,
            seed: 0,
            checkpoint_every: None,
            layers: toy.layers,
            heads: toy.heads,
            d_model: toy.d_model,
            d_ff: toy.d_ff,
            max_len: toy.max_len,
            min_count: 1,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train" => self.train = Some(value.into()),
            "eval" => self.eval = Some(value.into()),
            "init" => self.init = Some(value.into()),
            "out" => self.out = value.into(),
            "corpus-format" => self.format = Some(value.into()),
            "mode" => {
                self.mode = match value {
                    "auto" => ModeChoice::Auto,
                    other => ModeChoice::Fixed(other.parse()?),
                }
            }
            "epochs" => self.epochs = num(key, value)?,
            "batch-pairs" => self.batch_pairs = num(key, value)?,
            "lr" => self.lr = Some(num(key, value)?),
            "grad-clip" => self.grad_clip = Some(optional(key, value)?),
            "lambda" => self.lambda = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "ca-form" => self.ca_form = value.parse()?,
            "enable-ca" => self.enable_ca = num(key, value)?,
            "enable-cm" => self.enable_cm = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint-every" => self.checkpoint_every = optional(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "d-model" => self.d_model = num(key, value)?,
            "d-ff" => self.d_ff = num(key, value)?,
            "max-len" => self.max_len = num(key, value)?,
            "min-count" => self.min_count = num(key, value)?,
            "config" => return Err(Error::Config("config files cannot include other config files".into())),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn resolved_mode(&self) -> Mode {
        match self.mode {
            ModeChoice::Fixed(m) => m,
            ModeChoice::Auto if self.init.is_some() => Mode::FineTune,
            ModeChoice::Auto => Mode::FromScratch,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
            k: self.k,
            form: self.ca_form,
            enable_ca: self.enable_ca,
            enable_cm: self.enable_cm,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let base = TrainConfig::for_mode(self.resolved_mode());
        TrainConfig {
            epochs: self.epochs,
            batch_pairs: self.batch_pairs,
            lr: self.lr.unwrap_or(base.lr),
            loss: self.loss(),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            grad_clip: self.grad_clip.unwrap_or(base.grad_clip),
            mode: base.mode,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_len: self.max_len,
            vocab_size,
            seed: self.seed,
        }
    }

    /// Key-value form that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        let mut put = |k: &str, v: String| lines.push(format!("{k} = {v}"));
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        for (k, v) in [("train", path(&self.train)), ("eval", path(&self.eval)), ("init", path(&self.init))] {
            if let Some(v) = v {
                put(k, v);
            }
        }
        put("out", self.out.display().to_string());
        if let Some(f) = &self.format {
            put("corpus-format", f.clone());
        }
        put("mode", self.mode.to_string());
        put("epochs", self.epochs.to_string());
        put("batch-pairs", self.batch_pairs.to_string());
        if let Some(lr) = self.lr {
            put("lr", lr.to_string());
        }
        if let Some(c) = self.grad_clip {
            put("grad-clip", c.map_or("none".into(), |c| c.to_string()));
        }
        put("lambda", self.lambda.to_string());
        put("alpha", self.alpha.to_string());
        put("beta", self.beta.to_string());
        put("k", self.k.to_string());
        put("ca-form", self.ca_form.to_string());
        put("enable-ca", self.enable_ca.to_string());
        put("enable-cm", self.enable_cm.to_string());
        put("seed", self.seed.to_string());
        put("checkpoint-every", self.checkpoint_every.map_or("none".into(), |n| n.to_string()));
        put("layers", self.layers.to_string());
        put("heads", self.heads.to_string());
        put("d-model", self.d_model.to_string());
        put("d-ff", self.d_ff.to_string());
        put("max-len", self.max_len.to_string());
        put("min-count", self.min_count.to_string());
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_library_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.epochs, c.batch_pairs, c.k), (22, 18, 3));
        assert_eq!((c.lambda, c.alpha, c.beta), (1.0, 0.05, 0.02));
        assert_eq!(c.resolved_mode(), Mode::FromScratch);
        assert_eq!(c.train_config().lr, 3e-4);
    }

    #[test]
    fn auto_mode_follows_init() {
        let mut c = RunConfig::default();
        c.set("init", "a.ckpt").unwrap();
        assert_eq!(c.resolved_mode(), Mode::FineTune);
        let t = c.train_config();
        assert_eq!((t.lr, t.grad_clip), (1e-5, None));
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = RunConfig::default().apply_text("epochs = 3\nepoch = 4\n").unwrap_err();
        assert!(err.to_string().contains("line 2") && err.to_string().contains("\"epoch\""), "{err}");
    }

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("train = t.txt\nlr = 0.001\ngrad-clip = none\nca-form = literal\nenable-ca = false\n")
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }
}
