//! Document- and sentence-level style classifiers. They are trained once with
//! cross-entropy, frozen, and then read by the style losses and by evaluation.
//! Inputs may be hard tokens or soft distributions over the vocabulary.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{fingerprint, StyleId, StyledDoc, TokenId};
use crate::substrate::{
    load_arrays, sinusoidal_positions, store_to_arrays, Adam, Graph, Linear, NamedArray, ParamId, ParamStore, SubstrateError,
    TransformerStack, Var,
};

pub const CLASSIFIER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error("classifier needs at least two styles, corpus has {0}")]
    SingleStyle(usize),
    #[error("empty input")]
    Empty,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Document,
    Sentence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub vocab_size: usize,
    pub num_styles: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { vocab_size: 200, num_styles: 2, d: 32, heads: 2, ffn_hidden: 64, layers: 1, epochs: 3, lr: 1e-3, batch_size: 8 }
    }
}

/// Hard tokens or a `T × |V|` soft distribution.
#[derive(Clone, Copy, Debug)]
pub enum ClassifierInput<'a> {
    Tokens(&'a [TokenId]),
    Soft(Var),
}

#[derive(Clone, Debug)]
pub struct StyleClassifier {
    pub config: ClassifierConfig,
    pub granularity: Granularity,
    pub store: ParamStore,
    pub embed: ParamId,
    pub encoder: TransformerStack,
    pub head: Linear,
    /// Fingerprint of the corpus the classifier was trained on.
    pub corpus_fingerprint: String,
    pub val_accuracy: f64,
}

/// Graph handles of one classification.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    /// `1 × |S|` log-probabilities.
    pub log_probs: Var,
    /// Pooled penultimate representation, `1 × d`.
    pub pooled: Var,
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    version: u32,
    granularity: Granularity,
    corpus_fingerprint: String,
    val_accuracy: f64,
    config: ClassifierConfig,
    params: Vec<NamedArray>,
}

/// Training units for a granularity: whole documents or their sentences,
/// each sentence inheriting its document's label.
pub fn units(docs: &[StyledDoc], granularity: Granularity) -> Vec<(Vec<TokenId>, StyleId)> {
    match granularity {
        Granularity::Document => docs.iter().map(|d| (d.tokens.clone(), d.style)).collect(),
        Granularity::Sentence => docs
            .iter()
            .flat_map(|d| d.sentences().into_iter().map(move |s| (s.to_vec(), d.style)))
            .collect(),
    }
}

impl StyleClassifier {
    pub fn new(config: ClassifierConfig, granularity: Granularity, seed: u64) -> Result<Self, ClassifierError> {
        if config.num_styles < 2 {
            return Err(ClassifierError::SingleStyle(config.num_styles));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let embed = store.add_normal("cls.embed", config.vocab_size, d, 1.0 / (d as f64).sqrt(), &mut rng)?;
        let encoder = TransformerStack::new(&mut store, "cls.encoder", config.layers, d, config.heads, config.ffn_hidden, false, &mut rng)?;
        let head = Linear::new(&mut store, "cls.head", d, config.num_styles, true, &mut rng)?;
        Ok(Self { config, granularity, store, embed, encoder, head, corpus_fingerprint: String::new(), val_accuracy: 0.0 })
    }

    pub fn forward(&self, g: &mut Graph, input: ClassifierInput<'_>) -> Result<ClassifierOutput, ClassifierError> {
        let e = g.param(&self.store, self.embed);
        let rows = match input {
            ClassifierInput::Tokens(ids) => {
                if ids.is_empty() {
                    return Err(ClassifierError::Empty);
                }
                let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
                g.gather_rows(e, &idx)
            }
            ClassifierInput::Soft(p) => {
                if g.shape(p).0 == 0 {
                    return Err(ClassifierError::Empty);
                }
                g.matmul(p, e)
            }
        };
        let n = g.shape(rows).0;
        let d = self.config.d;
        let rows = g.scale(rows, (d as f64).sqrt());
        let pos = g.constant(sinusoidal_positions(n, d));
        let x = g.add(rows, pos);
        let h = self.encoder.forward(g, &self.store, x, None, None);
        let pooled = g.mean_rows(h);
        let logits = self.head.forward(g, &self.store, pooled);
        Ok(ClassifierOutput { log_probs: g.log_softmax(logits), pooled })
    }

    /// Probability vector over styles for hard tokens.
    pub fn classify(&self, tokens: &[TokenId]) -> Result<Vec<f64>, ClassifierError> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, ClassifierInput::Tokens(tokens))?;
        Ok(g.value(out.log_probs).data().iter().map(|v| v.exp()).collect())
    }

    pub fn predict(&self, tokens: &[TokenId]) -> Result<StyleId, ClassifierError> {
        let p = self.classify(tokens)?;
        Ok(argmax(&p))
    }

    /// Unit-normalised pooled representation `o`, `1 × d`.
    pub fn sentence_rep(&self, g: &mut Graph, input: ClassifierInput<'_>) -> Result<Var, ClassifierError> {
        let out = self.forward(g, input)?;
        Ok(g.l2_normalize_rows(out.pooled))
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    /// Fraction of units whose argmax matches the label.
    pub fn accuracy(&self, units: &[(Vec<TokenId>, StyleId)]) -> Result<f64, ClassifierError> {
        if units.is_empty() {
            return Err(ClassifierError::Empty);
        }
        let mut hits = 0usize;
        for (t, s) in units {
            if self.predict(t)? == *s {
                hits += 1;
            }
        }
        Ok(hits as f64 / units.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        let file = ClassifierFile {
            version: CLASSIFIER_FORMAT_VERSION,
            granularity: self.granularity,
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            val_accuracy: self.val_accuracy,
            config: self.config.clone(),
            params: store_to_arrays(&self.store),
        };
        fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    /// Loads a checkpoint; the result is frozen.
    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let file: ClassifierFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        if file.version != CLASSIFIER_FORMAT_VERSION {
            return Err(ClassifierError::Checkpoint(format!("unsupported classifier format version {}", file.version)));
        }
        let mut c = Self::new(file.config, file.granularity, 0)?;
        load_arrays(&mut c.store, &file.params)?;
        c.corpus_fingerprint = file.corpus_fingerprint;
        c.val_accuracy = file.val_accuracy;
        c.freeze();
        Ok(c)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains a classifier with cross-entropy on `train` and reports accuracy on
/// `val`. The returned classifier is frozen.
pub fn pretrain_classifier(
    config: ClassifierConfig,
    granularity: Granularity,
    train: &[StyledDoc],
    val: &[StyledDoc],
    seed: u64,
) -> Result<StyleClassifier, ClassifierError> {
    let labels: std::collections::BTreeSet<StyleId> = train.iter().map(|d| d.style).collect();
    if labels.len() < 2 {
        return Err(ClassifierError::SingleStyle(labels.len()));
    }
    let mut clf = StyleClassifier::new(config.clone(), granularity, seed)?;
    let data = units(train, granularity);
    let mut opt = Adam::new(config.lr).with_clip(Some(1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            for &i in chunk {
                let (tokens, style) = &data[i];
                let mut g = Graph::new();
                let out = clf.forward(&mut g, ClassifierInput::Tokens(tokens))?;
                let loss = g.nll(out.log_probs, vec![(0, *style, 1.0 / chunk.len() as f64)]);
                g.ensure_finite()?;
                total += g.scalar(loss) * chunk.len() as f64;
                clf.store.accumulate(&g.backward(loss));
            }
            opt.step(&mut clf.store);
        }
        log::info!("{granularity:?} classifier epoch {} mean loss {:.4}", epoch + 1, total / data.len() as f64);
    }
    let val_units = units(val, granularity);
    clf.val_accuracy = if val_units.is_empty() { 0.0 } else { clf.accuracy(&val_units)? };
    clf.corpus_fingerprint = fingerprint(train);
    clf.freeze();
    log::info!("{granularity:?} classifier validation accuracy {:.3}", clf.val_accuracy);
    Ok(clf)
}
