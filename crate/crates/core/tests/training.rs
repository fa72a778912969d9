//! Training loop contracts on small seeded fixtures.

mod common;

use attn_contrast::checkpoint;
use attn_contrast::data::{generate_synthetic, split, Corpus, SynthSpec};
use attn_contrast::eval::{accuracy, encode_labeled};
use attn_contrast::losses::{EncodedPair, LossConfig};
use attn_contrast::model::{Model, ModelConfig};
use attn_contrast::tokenizer::{build_vocab, Vocab};
use attn_contrast::train::*;
use common::*;

fn synth(pairs: usize, seed: u64) -> (Corpus, Vocab) {
    let spec = SynthSpec {
        pairs: Some(pairs),
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic(&spec, seed).unwrap();
    let vocab = build_vocab(&corpus, 1);
    (corpus, vocab)
}

fn little(vocab: &Vocab, seed: u64) -> Model {
    Model::init(ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        max_len: 16,
        vocab_size: vocab.len(),
        seed,
    })
    .unwrap()
}

fn cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        loss: LossConfig {
            k: 2,
            ..LossConfig::default()
        },
        ..TrainConfig::for_mode(Mode::FromScratch)
    }
}

#[test]
fn thirty_six_pairs_take_two_steps_per_epoch() {
    let (corpus, vocab) = synth(36, 1);
    let (pairs, skipped) = encode_pairs(&corpus, &vocab, 16);
    assert_eq!((pairs.len(), skipped.len()), (36, 0));
    let out = run_training(&cfg(2, 1), little(&vocab, 1), &pairs, None, None).unwrap();
    assert_eq!(out.epochs.iter().map(|e| e.steps).collect::<Vec<_>>(), [2, 2]);
    assert!(out.epochs.iter().all(|e| e.loss_variance >= 0.0 && e.loss.is_finite()));
}

#[test]
fn zero_epochs_checkpoints_initial_model() {
    let (corpus, vocab) = synth(4, 2);
    let (pairs, _) = encode_pairs(&corpus, &vocab, 16);
    let dir = tempfile::tempdir().unwrap();
    let model = little(&vocab, 2);
    let outputs = RunOutputs {
        dir: dir.path(),
        vocab: &vocab,
        header: serde_json::json!({"seed": 2}),
    };
    run_training(&cfg(0, 2), model.clone(), &pairs, None, Some(&outputs)).unwrap();
    let bytes = std::fs::read(dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(bytes, checkpoint::to_bytes(&model, &vocab));
    let log = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn seeded_runs_write_identical_logs_and_checkpoints() {
    let (corpus, vocab) = synth(12, 3);
    let (train, eval) = split(&corpus, 0.25, 3).unwrap();
    let (pairs, _) = encode_pairs(&train, &vocab, 16);
    let eval = encode_labeled(&eval, &vocab, 16);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let c = TrainConfig {
            batch_pairs: 4,
            checkpoint_every: Some(1),
            ..cfg(2, 3)
        };
        let outputs = RunOutputs {
            dir: dir.path(),
            vocab: &vocab,
            header: serde_json::to_value(&c).unwrap(),
        };
        run_training(&c, little(&vocab, 3), &pairs, Some(&eval), Some(&outputs)).unwrap();
        let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
        (read(METRICS_FILE), read(FINAL_CHECKPOINT), read("epoch-1.ckpt"))
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let log = String::from_utf8(a.0).unwrap();
    let kinds: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["record"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(kinds[0], "config");
    assert_eq!(kinds.iter().filter(|k| *k == "step").count(), 6);
    assert_eq!(kinds.iter().filter(|k| *k == "epoch").count(), 2);
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert!(last["eval_accuracy"].is_f64());
}

#[test]
fn five_adam_steps_are_reproducible() {
    let (corpus, vocab) = synth(5, 4);
    let (pairs, _) = encode_pairs(&corpus, &vocab, 16);
    let c = TrainConfig { batch_pairs: 1, ..cfg(1, 4) };
    let run = || {
        let mut m = little(&vocab, 4);
        let mut s = AdamState::new(&m);
        train_epoch(&mut m, &pairs, &c, &mut s, 0).unwrap();
        assert_eq!(s.step, 5);
        m
    };
    assert_eq!(run(), run());
}

#[test]
fn cm_only_pair_loss_drops_within_two_steps() {
    let vocab = small_vocab();
    let pair = encode(&short_pair(), &vocab, 8);
    let c = TrainConfig {
        batch_pairs: 1,
        lr: 1e-2,
        loss: LossConfig {
            enable_ca: false,
            k: 1,
            ..LossConfig::default()
        },
        ..cfg(1, 5)
    };
    let mut model = Model::init(gradcheck_config(5)).unwrap();
    let mut state = AdamState::new(&model);
    let mut losses = Vec::new();
    for epoch in 0..3 {
        let (m, steps) = train_epoch(&mut model, std::slice::from_ref(&pair), &c, &mut state, epoch).unwrap();
        assert!(steps.iter().all(|s| s.ca == 0.0));
        losses.push(m.loss);
    }
    assert!(losses[1] <= losses[0] || losses[2] <= losses[1], "{losses:?}");
}

#[test]
fn label_convention_is_invisible_to_training() {
    // Swapping candidate roles in every twin leaves the loss unchanged, so
    // the complementary labeling is an equally good fit; on any model the
    // two labelings score accuracies summing to 1.
    let (corpus, vocab) = synth(8, 6);
    let (pairs, _) = encode_pairs(&corpus, &vocab, 16);
    let model = run_training(&cfg(1, 6), little(&vocab, 6), &pairs, None, None).unwrap().model;
    let swap = |e: &attn_contrast::tokenizer::EncodedSchema| {
        let mut e = e.clone();
        e.spans.swap(0, 1);
        e
    };
    let c = cfg(1, 6).loss;
    for p in &pairs {
        let swapped = EncodedPair {
            first: swap(&p.first),
            second: swap(&p.second),
        };
        let (a, b) = (loss_value(&model, p, &c), loss_value(&model, &swapped, &c));
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }
    let mut complement = corpus.clone();
    for s in complement.pairs.iter_mut().flat_map(|p| [&mut p.first, &mut p.second]) {
        s.gold = s.gold.map(|g| 3 - g);
    }
    let acc = |c: &Corpus| accuracy(&model, &encode_labeled(c, &vocab, 16)).unwrap().accuracy;
    assert!((acc(&corpus) + acc(&complement) - 1.0).abs() < 1e-12);
}
