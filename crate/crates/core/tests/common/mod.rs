#![allow(dead_code)]

pub mod invariants;

use longstyle::classifiers::{pretrain_classifier, ClassifierConfig, Granularity, StyleClassifier};
use longstyle::corpus::{generate_synthetic, StyledDoc, SynthSpec, TokenId, NUM_RESERVED};
use longstyle::generator::{Model, ModelConfig};
use longstyle::runner::{Corpus, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small model over a 16-token vocabulary whose terminator is id 5.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        num_styles: 2,
        d: 8,
        heads: 2,
        ffn_hidden: 16,
        enc_layers: 1,
        dec_layers: 1,
        nar_layers: 2,
        fusion_layers: 1,
        jscw_layers: 2,
        half_window: 1,
        max_len: 40,
        terminators: vec![NUM_RESERVED as TokenId],
        ..ModelConfig::default()
    }
}

pub fn tiny_model(seed: u64) -> Model {
    Model::new(tiny_model_config(), seed).unwrap()
}

/// Random document over the tiny vocabulary with `sentences` sentences of 2..=5 tokens.
pub fn random_doc(rng: &mut impl Rng, sentences: usize, style: usize) -> StyledDoc {
    let mut tokens = Vec::new();
    let mut ends = Vec::new();
    for _ in 0..sentences {
        let len = rng.gen_range(2..=5);
        for _ in 0..len - 1 {
            tokens.push(rng.gen_range(NUM_RESERVED as TokenId + 1..16));
        }
        tokens.push(NUM_RESERVED as TokenId);
        ends.push(tokens.len());
    }
    StyledDoc { doc_id: format!("r{}", rng.gen::<u32>()), tokens, sentence_ends: ends, style }
}

pub fn tiny_classifier(granularity: Granularity, seed: u64) -> StyleClassifier {
    let cfg = ClassifierConfig { vocab_size: 16, num_styles: 2, d: 8, heads: 2, ffn_hidden: 16, layers: 1, ..ClassifierConfig::default() };
    let mut c = StyleClassifier::new(cfg, granularity, seed).unwrap();
    c.freeze();
    c
}

/// A small synthetic corpus (vocab 60) for fast pipeline tests.
pub fn small_corpus(seed: u64) -> Corpus {
    let spec = SynthSpec {
        vocab_size: 60,
        markers_per_style: 6,
        sentence_len_min: 3,
        sentence_len_max: 5,
        sentences_min: 2,
        sentences_max: 3,
        train_docs: 24,
        val_docs: 6,
        test_docs: 6,
        seed,
        ..SynthSpec::default()
    };
    Corpus::from_synth(generate_synthetic(&spec).unwrap())
}

/// A fast run configuration for pipeline tests.
pub fn small_run_config() -> RunConfig {
    RunConfig {
        d: 8,
        ffn_hidden: 16,
        enc_layers: 1,
        dec_layers: 1,
        nar_layers: 1,
        fusion_layers: 1,
        jscw_layers: 2,
        max_len: 32,
        lr: 2e-3,
        epochs: 1,
        batch_size: 4,
        cls_d: 8,
        cls_epochs: 1,
        ..RunConfig::default()
    }
}

pub fn small_classifiers(cfg: &RunConfig, corpus: &Corpus) -> (StyleClassifier, StyleClassifier) {
    let cc = cfg.classifier_config(corpus.vocab.len(), corpus.styles.len());
    (
        pretrain_classifier(cc.clone(), Granularity::Document, &corpus.train, &corpus.val, 1).unwrap(),
        pretrain_classifier(cc, Granularity::Sentence, &corpus.train, &corpus.val, 2).unwrap(),
    )
}

/// Runs a named check, printing one status line; returns whether it passed.
pub fn report(name: &str, result: Result<String, String>) -> bool {
    match result {
        Ok(detail) => {
            println!("PASS {name}: {detail}");
            true
        }
        Err(e) => {
            println!("FAIL {name}: {e}");
            false
        }
    }
}
