use std::path::Path;

use attn_contrast::checkpoint;
use attn_contrast::data::{
    generate_synthetic, parse_dpr, parse_winogrande_jsonl, parse_wsc_xml, split, write_dpr, Corpus, Ingested, SynthSpec,
};
use attn_contrast::eval::{accuracy, analyze as analyze_set, emit_report, encode_labeled, ReportFormat};
use attn_contrast::model::Model;
use attn_contrast::tokenizer::build_vocab;
use attn_contrast::train::{encode_pairs, run_training, RunOutputs, FINAL_CHECKPOINT, METRICS_FILE};
use attn_contrast::{Error, Result};

use crate::config::RunConfig;
use crate::{AnalyzeArgs, EvalArgs, GenSynthArgs, TrainArgs};

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn gen_synth(a: &GenSynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SynthSpec::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => SynthSpec::default(),
    };
    if a.pairs.is_some() {
        spec.pairs = a.pairs;
    }
    let corpus = generate_synthetic(&spec, a.seed)?;
    write(&a.out, &write_dpr(&corpus))?;
    println!("wrote {} pairs to {}", corpus.pairs.len(), a.out.display());
    if let Some(fraction) = a.split {
        let (Some(train_out), Some(eval_out)) = (&a.train_out, &a.eval_out) else {
            return Err(Error::Config("--split needs --train-out and --eval-out".into()));
        };
        let (train, eval) = split(&corpus, fraction, a.seed)?;
        write(train_out, &write_dpr(&train))?;
        write(eval_out, &write_dpr(&eval))?;
        println!(
            "split {} train pairs to {}, {} eval pairs to {}",
            train.pairs.len(),
            train_out.display(),
            eval.pairs.len(),
            eval_out.display()
        );
    } else if a.train_out.is_some() || a.eval_out.is_some() {
        return Err(Error::Config("--train-out and --eval-out need --split".into()));
    }
    Ok(())
}

/// Reads a corpus in `format`, or the format implied by the extension.
pub fn load_corpus(path: &Path, format: Option<&str>) -> Result<Corpus> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let format = format.unwrap_or(match ext {
        "xml" => "wsc",
        "jsonl" => "winogrande",
        _ => "dpr",
    });
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = || {
        String::from_utf8(bytes.clone()).map_err(|_| Error::Parse {
            path: path.display().to_string(),
            detail: "not UTF-8".into(),
        })
    };
    let Ingested { mut corpus, errors } = match format {
        "dpr" => parse_dpr(&text()?)?,
        "wsc" => parse_wsc_xml(&bytes)?,
        "winogrande" => parse_winogrande_jsonl(&text()?)?,
        other => return Err(Error::Config(format!("unknown corpus format {other:?}, expected dpr, wsc or winogrande"))),
    };
    for e in &errors {
        log::warn!("{}: record {} skipped: {}", path.display(), e.record, e.detail);
    }
    corpus.name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus").to_string();
    Ok(corpus)
}

pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &a.config {
        cfg.apply_file(path)?;
    }
    for (k, v) in a.overrides() {
        cfg.set(k, &v).map_err(|e| Error::Config(format!("--{k}: {e}")))?;
    }
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(a)?;
    let train_path = cfg
        .train
        .clone()
        .ok_or_else(|| Error::Config("a training corpus is required (--train or train = ...)".into()))?;
    let format = cfg.format.as_deref();
    let train = load_corpus(&train_path, format)?;
    let eval = cfg.eval.as_deref().map(|p| load_corpus(p, format)).transpose()?;
    let (model, vocab) = match &cfg.init {
        Some(p) => checkpoint::load(p)?,
        None => {
            // vocabulary from every supplied corpus; labels are never read
            let mut all = train.clone();
            if let Some(e) = &eval {
                all.pairs.extend(e.pairs.iter().cloned());
                all.singles.extend(e.singles.iter().cloned());
            }
            let vocab = build_vocab(&all, cfg.min_count);
            (Model::init(cfg.model_config(vocab.len()))?, vocab)
        }
    };
    let tc = cfg.train_config();
    let max_len = model.config.max_len;
    let (pairs, skipped) = encode_pairs(&train, &vocab, max_len);
    if !skipped.is_empty() {
        log::warn!("{} training pairs skipped: they do not encode within {max_len} tokens", skipped.len());
    }
    if !train.singles.is_empty() {
        log::warn!("{} unpaired schemas ignored by training", train.singles.len());
    }
    let eval_set = eval.as_ref().map(|e| encode_labeled(e, &vocab, max_len));
    let header = serde_json::json!({
        "command": "train",
        "config": cfg.to_text(),
        "resolved": {
            "mode": tc.mode,
            "lr": tc.lr,
            "grad_clip": tc.grad_clip,
            "model": {
                "layers": model.config.layers,
                "heads": model.config.heads,
                "d_model": model.config.d_model,
                "d_ff": model.config.d_ff,
                "max_len": max_len,
                "vocab_size": model.config.vocab_size,
            },
        },
        "train_pairs": pairs.len(),
        "skipped_pairs": skipped,
    });
    let outputs = RunOutputs {
        dir: &cfg.out,
        vocab: &vocab,
        header,
    };
    let outcome = run_training(&tc, model, &pairs, eval_set.as_ref(), Some(&outputs))?;
    if let Some(last) = outcome.epochs.last() {
        let acc = last.eval_accuracy.map_or(String::new(), |a| format!(", eval accuracy {a:.4}"));
        println!(
            "epoch {}: loss {:.6} (ca {:.6}, cm {:.6}){acc}",
            last.epoch + 1,
            last.loss,
            last.ca,
            last.cm
        );
    }
    println!(
        "wrote {} and {}",
        cfg.out.join(FINAL_CHECKPOINT).display(),
        cfg.out.join(METRICS_FILE).display()
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let (model, vocab) = checkpoint::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.data, a.corpus_format.as_deref())?;
    let set = encode_labeled(&corpus, &vocab, model.config.max_len);
    let report = accuracy(&model, &set)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write(&a.out, &json)?;
    println!(
        "accuracy {:.4} ({}/{}, {} ties, {} unlabeled, {} skipped)",
        report.accuracy, report.correct, report.total, report.ties, report.unlabeled, report.skipped
    );
    Ok(())
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let (model, vocab) = checkpoint::load(&a.checkpoint)?;
    let layers = model.config.layers;
    if a.k == 0 {
        return Err(Error::Config("--k must be at least 1".into()));
    }
    let k = if a.k > layers {
        log::warn!("--k {} exceeds the model's {layers} layers; using {layers}", a.k);
        layers
    } else {
        a.k
    };
    let corpus = load_corpus(&a.data, a.corpus_format.as_deref())?;
    let set = encode_labeled(&corpus, &vocab, model.config.max_len);
    let report = analyze_set(&model, &set, k)?;
    let out = a.out.clone().unwrap_or_else(|| {
        match format {
            ReportFormat::Json => "analysis.json",
            ReportFormat::Csv => "analysis.csv",
        }
        .into()
    });
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    emit_report(&report, format, &out)?;
    println!(
        "{} samples, k = {k}: |mean gap| {:.6} (last k {:.6}), |entropy gap| {:.6} (last k {:.6}); wrote {}",
        report.samples,
        report.mean_gap_full,
        report.mean_gap_last_k,
        report.entropy_gap_full,
        report.entropy_gap_last_k,
        out.display()
    );
    Ok(())
}
