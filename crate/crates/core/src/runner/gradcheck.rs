//! Finite-difference check of the full training loss on a toy model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RunnerError;
use crate::classifiers::{ClassifierConfig, Granularity, StyleClassifier};
use crate::corpus::{StyledDoc, TokenId, NUM_RESERVED};
use crate::generator::{Model, ModelConfig, SwapPlan};
use crate::objectives::{compute_losses, LossBundle, LossConfig, StepInputs};
use crate::substrate::{grad_check, GradCheckOptions, GradCheckReport, Graph, SubstrateError, Tensor, Var};

/// Loss component to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Total,
    RecSelf,
    RecCycle,
    StyD,
    StyS,
    Nar,
    Dis,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] =
        [Self::Total, Self::RecSelf, Self::RecCycle, Self::StyD, Self::StyS, Self::Nar, Self::Dis];

    pub fn name(self) -> &'static str {
        match self {
            Self::Total => "total",
            Self::RecSelf => "rec_self",
            Self::RecCycle => "rec_cycle",
            Self::StyD => "sty_d",
            Self::StyS => "sty_s",
            Self::Nar => "nar",
            Self::Dis => "dis",
        }
    }

    fn pick(self, b: &LossBundle) -> Var {
        match self {
            Self::Total => b.total,
            Self::RecSelf => b.rec_self,
            Self::RecCycle => b.rec_cycle,
            Self::StyD => b.sty_d,
            Self::StyS => b.sty_s,
            Self::Nar => b.nar,
            Self::Dis => b.dis,
        }
    }
}

/// Toy problem for the full-loss gradient check.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCheck {
    pub d: usize,
    pub layers: usize,
    pub docs: usize,
    pub max_tokens: usize,
    pub sentences: usize,
    pub vocab_size: usize,
    /// Entropy threshold; above ln 2 the hinge is active everywhere.
    pub epsilon: f64,
    /// Bias added to the terminator logit so generated text splits into several sentences.
    pub terminator_bias: f64,
    pub entries_per_param: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for ToyCheck {
    fn default() -> Self {
        Self {
            d: 8,
            layers: 2,
            docs: 2,
            max_tokens: 10,
            sentences: 2,
            vocab_size: 16,
            epsilon: 0.7,
            terminator_bias: 2.0,
            entries_per_param: 3,
            step: 1e-5,
            tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TermReport {
    pub term: LossTerm,
    pub report: GradCheckReport,
}

impl TermReport {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn toy_docs(toy: &ToyCheck, rng: &mut ChaCha8Rng) -> Vec<StyledDoc> {
    let term = NUM_RESERVED as TokenId;
    let per = (toy.max_tokens / toy.sentences).max(2);
    (0..toy.docs)
        .map(|i| {
            let mut tokens = Vec::new();
            let mut ends = Vec::new();
            for _ in 0..toy.sentences {
                let len = rng.gen_range(2..=per);
                for _ in 0..len - 1 {
                    tokens.push(rng.gen_range(NUM_RESERVED as TokenId + 1..toy.vocab_size as TokenId));
                }
                tokens.push(term);
                ends.push(tokens.len());
            }
            StyledDoc { doc_id: format!("toy{i}"), tokens, sentence_ends: ends, style: i % 2 }
        })
        .collect()
}

/// Builds the toy model, classifiers and documents for `seed`.
pub fn toy_setup(toy: &ToyCheck, seed: u64) -> Result<(Model, StyleClassifier, StyleClassifier, Vec<StyledDoc>), RunnerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mcfg = ModelConfig {
        vocab_size: toy.vocab_size,
        num_styles: 2,
        d: toy.d,
        heads: 2,
        ffn_hidden: 2 * toy.d,
        enc_layers: 1,
        dec_layers: 1,
        nar_layers: 1,
        fusion_layers: 1,
        jscw_layers: toy.layers,
        half_window: 1,
        max_len: 32,
        terminators: vec![NUM_RESERVED as TokenId],
        ..ModelConfig::default()
    };
    let mut model = Model::new(mcfg, seed)?;
    let mut bias = Tensor::zeros(1, toy.vocab_size);
    for j in 0..toy.vocab_size {
        bias.set(0, j, rng.gen_range(-0.1..0.1));
    }
    bias.set(0, NUM_RESERVED, toy.terminator_bias);
    model.store.set_value(model.out_bias, bias)?;
    let ccfg = ClassifierConfig {
        vocab_size: toy.vocab_size,
        num_styles: 2,
        d: toy.d,
        heads: 2,
        ffn_hidden: 2 * toy.d,
        layers: 1,
        ..ClassifierConfig::default()
    };
    let mut c_doc = StyleClassifier::new(ccfg.clone(), Granularity::Document, seed ^ 1)?;
    let mut c_sent = StyleClassifier::new(ccfg, Granularity::Sentence, seed ^ 2)?;
    c_doc.freeze();
    c_sent.freeze();
    let docs = toy_docs(toy, &mut rng);
    Ok((model, c_doc, c_sent, docs))
}

/// Checks the gradient of `term`, summed over the toy documents, against
/// central differences.
pub fn check_full_loss(toy: &ToyCheck, seed: u64, term: LossTerm) -> Result<TermReport, RunnerError> {
    let (mut model, c_doc, c_sent, docs) = toy_setup(toy, seed)?;
    let cfg = LossConfig { epsilon: toy.epsilon, ..LossConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let plans: Vec<(SwapPlan, SwapPlan, usize)> = docs
        .iter()
        .map(|d| {
            let n = d.tokens.len();
            (SwapPlan::sample(n, cfg.swap_p, cfg.swap_k, &mut rng), SwapPlan::sample(n, cfg.swap_p, cfg.swap_k, &mut rng), 1 - d.style)
        })
        .collect();
    let mut store = std::mem::take(&mut model.store);
    let opts = GradCheckOptions { step: toy.step, tolerance: toy.tolerance, max_entries_per_param: Some(toy.entries_per_param), seed };
    let report = grad_check(
        &mut store,
        |s| {
            model.store = s.clone();
            let mut g = Graph::new();
            let mut parts = Vec::with_capacity(docs.len());
            for (i, doc) in docs.iter().enumerate() {
                let (rec, tr, target) = &plans[i];
                let positive = &docs[(i + 1) % docs.len()].tokens;
                let inputs = StepInputs { doc, target: *target, positive, plan_rec: rec.clone(), plan_transfer: tr.clone() };
                let (b, _) = compute_losses(&mut g, &model, &c_doc, &c_sent, &inputs, &cfg)
                    .map_err(|e| SubstrateError::Config(e.to_string()))?;
                parts.push(term.pick(&b));
            }
            let out = g.add_all(&parts);
            Ok((g, out))
        },
        &opts,
    )?;
    Ok(TermReport { term, report })
}

/// Runs [`check_full_loss`] for every term and seed.
pub fn check_all(toy: &ToyCheck, seeds: &[u64], terms: &[LossTerm]) -> Result<Vec<(u64, TermReport)>, RunnerError> {
    let mut out = Vec::new();
    for &seed in seeds {
        for &t in terms {
            out.push((seed, check_full_loss(toy, seed, t)?));
        }
    }
    Ok(out)
}
