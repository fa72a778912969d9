//! `attn-contrast` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric or runtime error. Failures print one JSON object on stderr.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use attn_contrast::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "attn-contrast", version, about = "Attention-level contrastive training on Winograd-style twin pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic twin-pair corpus in the DPR text format.
    GenSynth(GenSynthArgs),
    /// Train a model with the self-supervised CA and CM losses.
    Train(TrainArgs),
    /// Score pronoun disambiguation accuracy on a labeled corpus.
    Eval(EvalArgs),
    /// Attention-map statistics on a labeled corpus.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// Generator spec file; the built-in lexicon when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep only this many pairs.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Output file for the whole corpus.
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out fraction of a lexeme-disjoint split; needs --train-out and --eval-out.
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long)]
    pub train_out: Option<PathBuf>,
    #[arg(long)]
    pub eval_out: Option<PathBuf>,
}

/// Every flag here overrides the same key in --config.
#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Key-value config file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training corpus (required here or in the config file).
    #[arg(long)]
    pub train: Option<String>,
    /// Labeled corpus scored after every epoch.
    #[arg(long)]
    pub eval: Option<String>,
    /// Start from this checkpoint; its vocabulary and shape replace the model flags.
    #[arg(long)]
    pub init: Option<String>,
    /// Output directory for checkpoints and metrics.jsonl [default: run]
    #[arg(long)]
    pub out: Option<String>,
    /// Corpus format: dpr, wsc or winogrande [default: by file extension]
    #[arg(long)]
    pub corpus_format: Option<String>,
    /// auto, fine-tune or from-scratch; auto picks fine-tune with --init [default: auto]
    #[arg(long)]
    pub mode: Option<String>,
    /// [default: 22]
    #[arg(long)]
    pub epochs: Option<String>,
    /// Twin pairs per optimizer step [default: 18]
    #[arg(long)]
    pub batch_pairs: Option<String>,
    /// Adam learning rate [default: 1e-5 fine-tune, 3e-4 from scratch]
    #[arg(long)]
    pub lr: Option<String>,
    /// Global gradient-norm clip, or none [default: none fine-tune, 1.0 from scratch]
    #[arg(long)]
    pub grad_clip: Option<String>,
    /// CA binarization weight [default: 1.0]
    #[arg(long)]
    pub lambda: Option<String>,
    /// CM weight [default: 0.05]
    #[arg(long)]
    pub alpha: Option<String>,
    /// CM margin offset [default: 0.02]
    #[arg(long)]
    pub beta: Option<String>,
    /// Final layers feeding CA [default: 3]
    #[arg(long)]
    pub k: Option<String>,
    /// coherent or literal [default: coherent]
    #[arg(long)]
    pub ca_form: Option<String>,
    /// Enable CA; naming only one of the two term flags disables the other [default: both on]
    #[arg(long)]
    pub enable_ca: bool,
    /// Enable CM; naming only one of the two term flags disables the other [default: both on]
    #[arg(long)]
    pub enable_cm: bool,
    /// Seeds initialization and batch order [default: 0]
    #[arg(long)]
    pub seed: Option<String>,
    /// Write epoch-N.ckpt every N epochs, or none [default: none]
    #[arg(long)]
    pub checkpoint_every: Option<String>,
    /// [default: 3]
    #[arg(long)]
    pub layers: Option<String>,
    /// [default: 4]
    #[arg(long)]
    pub heads: Option<String>,
    /// [default: 64]
    #[arg(long)]
    pub d_model: Option<String>,
    /// [default: 256]
    #[arg(long)]
    pub d_ff: Option<String>,
    /// Context length in tokens [default: 64]
    #[arg(long)]
    pub max_len: Option<String>,
    /// Minimum token count for the vocabulary [default: 1]
    #[arg(long)]
    pub min_count: Option<String>,
}

impl TrainArgs {
    /// Flags given on the command line, as config keys.
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let fields: [(&'static str, &Option<String>); 23] = [
            ("train", &self.train),
            ("eval", &self.eval),
            ("init", &self.init),
            ("out", &self.out),
            ("corpus-format", &self.corpus_format),
            ("mode", &self.mode),
            ("epochs", &self.epochs),
            ("batch-pairs", &self.batch_pairs),
            ("lr", &self.lr),
            ("grad-clip", &self.grad_clip),
            ("lambda", &self.lambda),
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("k", &self.k),
            ("ca-form", &self.ca_form),
            ("seed", &self.seed),
            ("checkpoint-every", &self.checkpoint_every),
            ("layers", &self.layers),
            ("heads", &self.heads),
            ("d-model", &self.d_model),
            ("d-ff", &self.d_ff),
            ("max-len", &self.max_len),
            ("min-count", &self.min_count),
        ];
        for (k, v) in fields {
            if let Some(v) = v {
                out.push((k, v.clone()));
            }
        }
        if self.enable_ca || self.enable_cm {
            out.push(("enable-ca", self.enable_ca.to_string()));
            out.push(("enable-cm", self.enable_cm.to_string()));
        }
        out
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled corpus.
    #[arg(long)]
    pub data: PathBuf,
    /// dpr, wsc or winogrande [default: by file extension]
    #[arg(long)]
    pub corpus_format: Option<String>,
    /// JSON report path.
    #[arg(long, default_value = "eval-report.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled corpus.
    #[arg(long)]
    pub data: PathBuf,
    /// dpr, wsc or winogrande [default: by file extension]
    #[arg(long)]
    pub corpus_format: Option<String>,
    /// Final layers for the last-k statistics; clamped to the layer count.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Report format: json or csv.
    #[arg(long, default_value = "json")]
    pub format: String,
    /// Report path [default: analysis.json or analysis.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("config", 1),
        Error::Parse { .. }
        | Error::Encoding(_)
        | Error::Length { .. }
        | Error::Checkpoint { .. }
        | Error::Evaluation(_)
        | Error::Io { .. } => ("data", 2),
        Error::Shape { .. } | Error::Domain { .. } | Error::Contract(_) | Error::NonFinite(_) => ("numeric", 3),
    }
}

fn fail(kind: &str, code: u8, message: String) -> ExitCode {
    let record = serde_json::json!({ "error": kind, "exit_code": code, "message": message });
    eprintln!("{record}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version; a closed stdout is not an error
            let _ = write!(std::io::stdout(), "{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            return fail("usage", 1, first.to_string());
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Analyze(a) => commands::analyze(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = exit_code(&e);
            fail(kind, code, e.to_string())
        }
    }
}
