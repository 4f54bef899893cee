//! Training losses: self and cycle reconstruction, the document-level style
//! loss, the contrastive sentence-level style consistency loss, the NAR
//! denoising loss, the entropy hinge on the attribute weights, and their
//! weighted total. Generated text stays soft so every term is differentiable.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifiers::{ClassifierError, ClassifierInput, StyleClassifier};
use crate::corpus::{StyleId, StyledDoc, TokenId};
use crate::generator::{decodable_argmax, split_sentences, GeneratorError, Model, SoftSequence, SwapPlan};
use crate::jscw::JscwLayerVars;
use crate::substrate::{Graph, SubstrateError, Tensor, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error("loss component `{0}` is not finite")]
    NonFinite(&'static str),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Entropy threshold of the hinge, in nats.
    pub epsilon: f64,
    /// Add the positive to the contrastive denominator.
    pub infonce: bool,
    /// Drop the sentence-level style term entirely.
    pub ablate_sty_s: bool,
    /// Feed the NAR pseudo-target to the AR decoder as distributions rather than argmax tokens.
    pub soft_pseudo: bool,
    pub swap_p: f64,
    pub swap_k: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.05,
            lambda2: 1.0,
            lambda3: 1.0,
            tau: 0.5,
            epsilon: 0.15,
            infonce: false,
            ablate_sty_s: false,
            soft_pseudo: true,
            swap_p: 0.3,
            swap_k: 2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: String| Err(ObjectiveError::Config(m));
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return bad(format!("loss weights must be non-negative, got {}/{}/{}", self.lambda1, self.lambda2, self.lambda3));
        }
        if self.tau <= 0.0 {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.epsilon <= 0.0 {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.swap_p) {
            return bad(format!("swap_p must lie in [0, 1], got {}", self.swap_p));
        }
        if self.swap_k < 1 {
            return bad("swap_k must be at least 1".into());
        }
        Ok(())
    }
}

/// Graph handles of the six components and the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub rec_self: Var,
    pub rec_cycle: Var,
    pub sty_d: Var,
    pub sty_s: Var,
    pub nar: Var,
    pub dis: Var,
    pub total: Var,
}

/// Plain values of a [`LossBundle`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub rec_self: f64,
    pub rec_cycle: f64,
    pub sty_d: f64,
    pub sty_s: f64,
    pub nar: f64,
    pub dis: f64,
    pub total: f64,
}

impl LossValues {
    /// `rec_self + rec_cycle + λ1(sty_d + sty_s) + λ2·nar + λ3·dis`, evaluated
    /// in the same order as the graph.
    pub fn recompose(&self, cfg: &LossConfig) -> f64 {
        let rec = self.rec_self + self.rec_cycle;
        let sty = (self.sty_d + self.sty_s) * cfg.lambda1;
        rec + sty + self.nar * cfg.lambda2 + self.dis * cfg.lambda3
    }

    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("rec_self", self.rec_self),
            ("rec_cycle", self.rec_cycle),
            ("sty_d", self.sty_d),
            ("sty_s", self.sty_s),
            ("nar", self.nar),
            ("dis", self.dis),
        ]
    }

    pub fn add_scaled(&mut self, other: &LossValues, s: f64) {
        self.rec_self += s * other.rec_self;
        self.rec_cycle += s * other.rec_cycle;
        self.sty_d += s * other.sty_d;
        self.sty_s += s * other.sty_s;
        self.nar += s * other.nar;
        self.dis += s * other.dis;
        self.total += s * other.total;
    }
}

impl LossBundle {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            rec_self: g.scalar(self.rec_self),
            rec_cycle: g.scalar(self.rec_cycle),
            sty_d: g.scalar(self.sty_d),
            sty_s: g.scalar(self.sty_s),
            nar: g.scalar(self.nar),
            dis: g.scalar(self.dis),
            total: g.scalar(self.total),
        }
    }

    /// Fails naming the first non-finite component.
    pub fn check_finite(&self, g: &Graph) -> Result<(), ObjectiveError> {
        for (name, v) in self.values(g).components() {
            if !v.is_finite() {
                return Err(ObjectiveError::NonFinite(name));
            }
        }
        if !g.scalar(self.total).is_finite() {
            return Err(ObjectiveError::NonFinite("total"));
        }
        Ok(())
    }
}

/// Weighted total over component handles.
pub fn total_loss(
    g: &mut Graph,
    parts: [Var; 6],
    cfg: &LossConfig,
) -> Var {
    let [rec_self, rec_cycle, sty_d, sty_s, nar, dis] = parts;
    let rec = g.add(rec_self, rec_cycle);
    let sty = g.add(sty_d, sty_s);
    let sty = g.scale(sty, cfg.lambda1);
    let nar = g.scale(nar, cfg.lambda2);
    let dis = g.scale(dis, cfg.lambda3);
    g.add_all(&[rec, sty, nar, dis])
}

/// Mean cross-entropy of `logits` rows against `targets`, skipping positions
/// where `mask` is false. Returns zero when every position is masked.
pub fn token_nll(g: &mut Graph, logits: Var, targets: &[TokenId], mask: Option<&[bool]>) -> Var {
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let count = (0..targets.len()).filter(|&i| keep(i)).count();
    let lp = g.log_softmax(logits);
    let w = if count == 0 { 0.0 } else { 1.0 / count as f64 };
    let picks = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| (i, t as usize, if keep(i) { w } else { 0.0 }))
        .collect();
    g.nll(lp, picks)
}

/// `-log P_C(target | y)` on the soft path.
pub fn style_doc_loss(g: &mut Graph, classifier: &StyleClassifier, y: Var, target: StyleId) -> Result<Var, ObjectiveError> {
    let out = classifier.forward(g, ClassifierInput::Soft(y))?;
    Ok(g.nll(out.log_probs, vec![(0, target, 1.0)]))
}

/// Contrastive loss over unit representations. `oy` holds the generated
/// sentences (`m̂ × d`), `ox` the source sentences (`m × d`, negatives), and
/// `sampled` the positive used for the first generated sentence. Sentence
/// `j > 1` uses every earlier generated sentence as a positive. The
/// denominator sums over the source sentences only unless `infonce` is set.
pub fn contrastive_from_reps(g: &mut Graph, oy: Var, ox: Var, sampled: Var, tau: f64, infonce: bool) -> Var {
    let my = g.shape(oy).0;
    let m = g.shape(ox).0;
    let neg = g.matmul_t(oy, ox, false, true);
    let neg = g.scale(neg, 1.0 / tau);
    let pos_first = g.matmul_t(oy, sampled, false, true);
    let pos_first = g.scale(pos_first, 1.0 / tau);
    let pos_pairs = g.matmul_t(oy, oy, false, true);
    let pos_pairs = g.scale(pos_pairs, 1.0 / tau);
    let mut rows = Vec::new();
    for j in 0..my {
        let negs = g.slice_rows(neg, j, 1);
        let positives: Vec<Var> = if j == 0 {
            vec![g.slice_rows(pos_first, 0, 1)]
        } else {
            let row = g.slice_rows(pos_pairs, j, 1);
            (0..j).map(|jp| g.slice_cols(row, jp, 1)).collect()
        };
        for p in positives {
            rows.push(g.concat_cols(&[p, negs]));
        }
    }
    let pairs = g.concat_rows(&rows);
    let terms = if infonce {
        let lp = g.log_softmax(pairs);
        g.slice_cols(lp, 0, 1)
    } else {
        // pos - logsumexp(negs), with logsumexp = x_0 - log_softmax(x)_0.
        let pos = g.slice_cols(pairs, 0, 1);
        let negs = g.slice_cols(pairs, 1, m);
        let first = g.slice_cols(negs, 0, 1);
        let lsm = g.log_softmax(negs);
        let lsm0 = g.slice_cols(lsm, 0, 1);
        let lse = g.sub(first, lsm0);
        g.sub(pos, lse)
    };
    let s = g.sum(terms);
    g.scale(s, -1.0 / my as f64)
}

/// Sentence-level style consistency loss of soft output `y` against source `x`.
#[allow(clippy::too_many_arguments)]
pub fn style_consistency_loss(
    g: &mut Graph,
    classifier: &StyleClassifier,
    y: &SoftSequence,
    x: &StyledDoc,
    sampled_positive: &[TokenId],
    terminators: &[TokenId],
    tau: f64,
    infonce: bool,
) -> Result<Var, ObjectiveError> {
    let (spans, found) = split_sentences(&y.tokens, terminators);
    if !found {
        log::warn!("generated text has no sentence boundary; treating it as one sentence");
    }
    let mut oy = Vec::with_capacity(spans.len());
    for (s, l) in spans {
        let part = g.slice_rows(y.probs, s, l);
        oy.push(classifier.sentence_rep(g, ClassifierInput::Soft(part))?);
    }
    let mut ox = Vec::new();
    for sent in x.sentences() {
        ox.push(classifier.sentence_rep(g, ClassifierInput::Tokens(sent))?);
    }
    let sampled = classifier.sentence_rep(g, ClassifierInput::Tokens(sampled_positive))?;
    let oy = g.concat_rows(&oy);
    let ox = g.concat_rows(&ox);
    Ok(contrastive_from_reps(g, oy, ox, sampled, tau, infonce))
}

/// Natural-log entropy of `[alpha, beta]`.
pub fn pair_entropy(alpha: f64, beta: f64) -> f64 {
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    h(alpha) + h(beta)
}

/// `Σ max(0, ε - H([α, β]))` over plain weights.
pub fn disentanglement_penalty_values(weights: &[(f64, f64)], epsilon: f64) -> f64 {
    weights.iter().map(|&(a, b)| (epsilon - pair_entropy(a, b)).max(0.0)).sum()
}

/// The entropy hinge summed over tokens and weigher layers.
pub fn disentanglement_penalty(g: &mut Graph, layers: &[JscwLayerVars], epsilon: f64) -> Var {
    let parts: Vec<Var> = layers
        .iter()
        .map(|l| {
            let neg_h = g.row_dot(l.weights, l.log_weights);
            let gap = g.add_scalar(neg_h, epsilon);
            let hinge = g.relu(gap);
            g.sum(hinge)
        })
        .collect();
    g.add_all(&parts)
}

/// Distribution-weighted sum of embedding rows.
pub fn soft_sample_embed(dist: &[f64], table: &Tensor) -> Vec<f64> {
    assert_eq!(dist.len(), table.rows());
    let mut out = vec![0.0; table.cols()];
    for (p, r) in dist.iter().zip(0..table.rows()) {
        for (o, e) in out.iter_mut().zip(table.row(r)) {
            *o += p * e;
        }
    }
    out
}

/// Seeded pool of training sentences per style, reshuffled every epoch.
#[derive(Clone, Debug)]
pub struct PositivePool {
    by_style: Vec<Vec<Vec<TokenId>>>,
    cursor: Vec<usize>,
    seed: u64,
}

impl PositivePool {
    pub fn new(docs: &[StyledDoc], num_styles: usize, seed: u64) -> Self {
        let mut by_style = vec![Vec::new(); num_styles];
        for d in docs {
            for s in d.sentences() {
                by_style[d.style].push(s.to_vec());
            }
        }
        let mut pool = Self { by_style, cursor: vec![0; num_styles], seed };
        pool.reshuffle(0);
        pool
    }

    pub fn reshuffle(&mut self, epoch: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        for v in &mut self.by_style {
            v.shuffle(&mut rng);
        }
        self.cursor.iter_mut().for_each(|c| *c = 0);
    }

    pub fn next(&mut self, style: StyleId) -> Option<&[TokenId]> {
        let v = self.by_style.get(style)?;
        if v.is_empty() {
            return None;
        }
        let i = self.cursor[style] % v.len();
        self.cursor[style] += 1;
        Some(&v[i])
    }
}

/// Per-document randomness of one training step.
#[derive(Clone, Debug)]
pub struct StepInputs<'a> {
    pub doc: &'a StyledDoc,
    pub target: StyleId,
    pub positive: &'a [TokenId],
    /// Corruption of the reconstruction-direction NAR input.
    pub plan_rec: SwapPlan,
    /// Corruption of the transfer-direction NAR input.
    pub plan_transfer: SwapPlan,
}

/// Everything one forward pass produces besides the losses.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub y: SoftSequence,
    pub pseudo_tokens: Vec<TokenId>,
    pub jscw: Vec<JscwLayerVars>,
}

/// Builds every loss for one document in `g`.
pub fn compute_losses(
    g: &mut Graph,
    model: &Model,
    c_doc: &StyleClassifier,
    c_sent: &StyleClassifier,
    inputs: &StepInputs<'_>,
    cfg: &LossConfig,
) -> Result<(LossBundle, StepTrace), ObjectiveError> {
    let doc = inputs.doc;
    let (s, t) = (doc.style, inputs.target);
    let x = &doc.tokens;
    let n = x.len();
    let mut targets = x.clone();
    targets.push(crate::corpus::EOS);

    let parts = model.content_of(g, doc)?;
    let z_src = model.fuse_style(g, parts.content, s)?;
    let rec_logits = model.ar_teacher_forced(g, z_src, x);
    let rec_self = token_nll(g, rec_logits, &targets, None);

    let nar_logits = model.nar_corrupted(g, z_src, x, &inputs.plan_rec);
    let nar = token_nll(g, nar_logits, x, None);

    let dis = disentanglement_penalty(g, &parts.jscw.layers, cfg.epsilon);

    // Transfer direction: NAR pseudo-target, then one parallel AR pass.
    let z_tgt = model.fuse_style(g, parts.content, t)?;
    let pseudo_logits = model.nar_corrupted(g, z_tgt, x, &inputs.plan_transfer);
    let pseudo = g.softmax(pseudo_logits);
    let pseudo_tokens: Vec<TokenId> = (0..n).map(|i| decodable_argmax(g.value(pseudo).row(i))).collect();
    let pseudo_ref = if cfg.soft_pseudo {
        pseudo
    } else {
        let mut oh = Tensor::zeros(n, model.config.vocab_size);
        for (i, &tok) in pseudo_tokens.iter().enumerate() {
            oh.set(i, tok as usize, 1.0);
        }
        g.constant(oh)
    };
    let y_logits = model.ar_teacher_forced_soft(g, z_tgt, pseudo_ref);
    let y_logits = g.slice_rows(y_logits, 0, n);
    let y_probs = g.softmax(y_logits);
    let y_tokens = (0..n).map(|i| decodable_argmax(g.value(y_probs).row(i))).collect();
    let y = SoftSequence { probs: y_probs, tokens: y_tokens };

    let sty_d = style_doc_loss(g, c_doc, y.probs, t)?;
    let sty_s = if cfg.ablate_sty_s {
        g.constant(Tensor::scalar(0.0))
    } else {
        style_consistency_loss(g, c_sent, &y, doc, inputs.positive, &model.config.terminators, cfg.tau, cfg.infonce)?
    };

    let enc_y = model.encode_soft(g, &y)?;
    let parts_y = model.weigh(g, &enc_y, t)?;
    let z_back = model.fuse_style(g, parts_y.content, s)?;
    let cyc_logits = model.ar_teacher_forced(g, z_back, x);
    let rec_cycle = token_nll(g, cyc_logits, &targets, None);

    let total = total_loss(g, [rec_self, rec_cycle, sty_d, sty_s, nar, dis], cfg);
    let bundle = LossBundle { rec_self, rec_cycle, sty_d, sty_s, nar, dis, total };
    Ok((bundle, StepTrace { y, pseudo_tokens, jscw: parts.jscw.layers }))
}

/// Append-only CSV of per-step loss components.
pub struct LossLog {
    out: BufWriter<File>,
}

pub const LOSS_LOG_HEADER: &str = "step,rec_self,rec_cycle,sty_d,sty_s,nar,dis,total";

impl LossLog {
    /// Opens `path` for appending, writing the header if the file is new or empty.
    pub fn open(path: &Path) -> Result<Self, ObjectiveError> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(f);
        if fresh {
            writeln!(out, "{LOSS_LOG_HEADER}")?;
        }
        Ok(Self { out })
    }

    pub fn append(&mut self, step: usize, v: &LossValues) -> Result<(), ObjectiveError> {
        writeln!(
            self.out,
            "{step},{},{},{},{},{},{},{}",
            v.rec_self, v.rec_cycle, v.sty_d, v.sty_s, v.nar, v.dis, v.total
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), ObjectiveError> {
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn equal_similarities_give_log_m() {
        let mut g = Graph::new();
        let v = vec![1.0, 0.0];
        let oy = g.constant(unit_rows(std::slice::from_ref(&v)));
        let ox = g.constant(unit_rows(&[v.clone(), v.clone(), v.clone()]));
        let sp = g.constant(unit_rows(&[v]));
        let l = contrastive_from_reps(&mut g, oy, ox, sp, 0.5, false);
        assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_sentence_closed_form() {
        // o1 = o2 = e1, source reps orthogonal (e2, e3), sampled positive e2.
        let mut g = Graph::new();
        let oy = g.constant(unit_rows(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]));
        let ox = g.constant(unit_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]));
        let sp = g.constant(unit_rows(&[vec![0.0, 1.0, 0.0]]));
        let l = contrastive_from_reps(&mut g, oy, ox, sp, 1.0, false);
        let inner = -1.0 + 2f64.ln();
        let first = -(0.0 - 2f64.ln());
        assert!((g.scalar(l) - (inner + first) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_falls_as_positive_similarity_rises() {
        let mut last = f64::INFINITY;
        for k in 0..10 {
            let theta = 1.5 - 0.15 * k as f64;
            let mut g = Graph::new();
            let oy = g.constant(unit_rows(&[vec![1.0, 0.0, 0.0], vec![theta.cos(), theta.sin(), 0.0]]));
            let ox = g.constant(unit_rows(&[vec![0.0, 0.0, 1.0]]));
            let sp = g.constant(unit_rows(&[vec![1.0, 0.0, 0.0]]));
            let v = {
                let l = contrastive_from_reps(&mut g, oy, ox, sp, 0.5, false);
                g.scalar(l)
            };
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn hinge_closed_forms() {
        assert_eq!(disentanglement_penalty_values(&[(0.5, 0.5)], 0.15), 0.0);
        let h = -0.99 * 0.99f64.ln() - 0.01 * 0.01f64.ln();
        let v = disentanglement_penalty_values(&[(0.99, 0.01)], 0.15);
        assert!((v - (0.15 - h)).abs() < 1e-12);
        assert!((v - 0.0940).abs() < 1e-4);
    }

    #[test]
    fn total_of_ones_is_4_1() {
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let ones: Vec<Var> = (0..6).map(|_| g.constant(Tensor::scalar(1.0))).collect();
        let t = total_loss(&mut g, [ones[0], ones[1], ones[2], ones[3], ones[4], ones[5]], &cfg);
        assert!((g.scalar(t) - 4.1).abs() < 1e-12);
        let v = LossValues { rec_self: 1.0, rec_cycle: 1.0, sty_d: 1.0, sty_s: 1.0, nar: 1.0, dis: 1.0, total: g.scalar(t) };
        assert_eq!(v.recompose(&cfg), v.total);
    }

    #[test]
    fn uniform_distribution_costs_log_v() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(3, 16));
        let l = token_nll(&mut g, logits, &[1, 5, 9], None);
        assert!((g.scalar(l) - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_positions_contribute_nothing() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let logits = g.constant(Tensor::from_vec(3, 4, data));
        let full = token_nll(&mut g, logits, &[1, 2], None);
        let l2 = g.slice_rows(logits, 0, 2);
        let short = {
            let v = token_nll(&mut g, l2, &[1, 2], None);
            g.scalar(v)
        };
        let padded = token_nll(&mut g, logits, &[1, 2, 0], Some(&[true, true, false]));
        assert_eq!(g.scalar(padded), short);
        assert_eq!(g.scalar(full), short);
    }

    #[test]
    fn soft_embedding_laws() {
        let table = Tensor::from_vec(3, 2, vec![1.0, 2.0, -3.0, 0.5, 4.0, 4.0]);
        assert_eq!(soft_sample_embed(&[0.0, 1.0, 0.0], &table), vec![-3.0, 0.5]);
        assert_eq!(soft_sample_embed(&[0.5, 0.5, 0.0], &table), vec![-1.0, 1.25]);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig { lambda2: -1.0, ..Default::default() },
            LossConfig { tau: 0.0, ..Default::default() },
            LossConfig { epsilon: 0.0, ..Default::default() },
            LossConfig { swap_p: 1.5, ..Default::default() },
            LossConfig { swap_k: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
