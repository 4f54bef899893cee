//! The multilayer joint style/content weigher.
//!
//! Each layer scores every word token twice: a style score from a windowed
//! convolution read against the style embedding, and a content score from
//! bilinear word-to-sentence relevance aggregated by attention over all
//! sentences. A two-way softmax turns the pair into `(alpha, beta)` with
//! `alpha + beta = 1`, and the word state is scaled by its content weight
//! `beta`. Between consecutive layers a Transformer layer refines the whole
//! marked sequence and fresh sentence states are read off the sentence markers.
//!
//! Semantics are fixed by role: the softmax mass on the content score is the
//! content weight `beta` used for scaling, the mass on the style score is `alpha`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::substrate::{Graph, Linear, ParamId, ParamStore, SubstrateError, Tensor, TransformerStack, Var};

/// How the pair of attribute weights is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeighMode {
    /// Two-way softmax over the content and style scores.
    #[default]
    Joint,
    /// Ablation without the content score: `beta = sigmoid(style score)`.
    StyleOnly,
}

/// Trainable weights of one weigher layer.
#[derive(Clone, Debug)]
pub struct JscwLayerParams {
    /// Window convolution, `(2h+1)·d → d`.
    pub conv: Linear,
    /// Bilinear style term, `d × d`.
    pub w_style: ParamId,
    /// Bilinear content term, `d × d`.
    pub w_content: ParamId,
}

#[derive(Clone, Debug)]
pub struct Jscw {
    pub layers: Vec<JscwLayerParams>,
    /// One single-head refinement layer between consecutive weigher layers.
    pub refine: Vec<TransformerStack>,
    pub half_window: usize,
    pub mode: WeighMode,
    /// Diagnostic: overrides every content weight with this constant.
    pub force_beta: Option<f64>,
}

impl Jscw {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        depth: usize,
        d: usize,
        half_window: usize,
        ffn_hidden: usize,
        mode: WeighMode,
        rng: &mut R,
    ) -> Result<Self, SubstrateError> {
        if depth == 0 {
            return Err(SubstrateError::Config("at least one weigher layer is required".into()));
        }
        let window = 2 * half_window + 1;
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            layers.push(JscwLayerParams {
                conv: Linear::new(store, &format!("jscw.{l}.conv"), window * d, d, true, rng)?,
                w_style: store.add_uniform(format!("jscw.{l}.w_style"), d, d, rng)?,
                w_content: store.add_uniform(format!("jscw.{l}.w_content"), d, d, rng)?,
            });
        }
        let refine = (0..depth - 1)
            .map(|l| TransformerStack::new(store, &format!("jscw.refine.{l}"), 1, d, 1, ffn_hidden, false, rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { layers, refine, half_window, mode, force_beta: None })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Positions of words and sentence markers inside a marked sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub word_pos: Vec<usize>,
    pub sen_pos: Vec<usize>,
    /// For each word, the index of its sentence.
    pub word_sentence: Vec<usize>,
}

impl SequenceLayout {
    /// Splits a marked sequence by the given marker predicate. Words after the
    /// last marker are assigned to the last sentence. Returns `None` without markers.
    pub fn from_markers(is_marker: impl Iterator<Item = bool>) -> Option<Self> {
        let (mut word_pos, mut sen_pos, mut pending) = (Vec::new(), Vec::new(), Vec::new());
        let mut word_sentence = Vec::new();
        for (p, m) in is_marker.enumerate() {
            if m {
                for _ in pending.drain(..) {
                    word_sentence.push(sen_pos.len());
                }
                sen_pos.push(p);
            } else {
                word_pos.push(p);
                pending.push(p);
            }
        }
        if sen_pos.is_empty() {
            return None;
        }
        let last = sen_pos.len() - 1;
        word_sentence.extend(pending.iter().map(|_| last));
        Some(Self { word_pos, sen_pos, word_sentence })
    }

    pub fn len(&self) -> usize {
        self.word_pos.len() + self.sen_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_words(&self) -> usize {
        self.word_pos.len()
    }

    pub fn num_sentences(&self) -> usize {
        self.sen_pos.len()
    }

    /// For `concat_rows([words, sentences])`, the row index feeding each sequence position.
    fn restore_order(&self) -> Vec<usize> {
        let mut perm = vec![0; self.len()];
        for (k, &p) in self.word_pos.iter().enumerate() {
            perm[p] = k;
        }
        for (k, &p) in self.sen_pos.iter().enumerate() {
            perm[p] = self.word_pos.len() + k;
        }
        perm
    }
}

/// Graph handles produced by one weigher layer.
#[derive(Clone, Copy, Debug)]
pub struct JscwLayerVars {
    /// Raw style scores, `n × 1`.
    pub style_score: Var,
    /// Raw content scores, `n × 1` (absent in the style-only ablation).
    pub content_score: Option<Var>,
    /// Word-to-sentence attention, `n × m`.
    pub mu: Option<Var>,
    /// Columns `[beta, alpha]`, `n × 2`.
    pub weights: Var,
    /// Log of `weights`, `n × 2`.
    pub log_weights: Var,
    /// Content weights `beta`, `n × 1`.
    pub beta: Var,
    /// Content representations `beta_i · x_i`, `n × d`.
    pub content_reps: Var,
}

#[derive(Clone, Debug)]
pub struct JscwOutput {
    /// Final marked-sequence representation: scaled word rows, unscaled marker rows.
    pub content: Var,
    pub layers: Vec<JscwLayerVars>,
}

/// Per-token attribute weights with `alpha + beta = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeWeights {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Plain values recorded for each layer.
#[derive(Clone, Debug, PartialEq)]
pub struct JscwLayerTrace {
    pub style_score: Vec<f64>,
    pub content_score: Option<Vec<f64>>,
    pub mu: Option<Tensor>,
    pub weights: AttributeWeights,
    pub content_reps: Tensor,
}

pub type JscwTrace = Vec<JscwLayerTrace>;

/// Style scores: `relu(W_conv · x_{i-h..i+h} + b_conv) · W_s · s`, `n × 1`.
pub fn style_score(
    g: &mut Graph,
    store: &ParamStore,
    params: &JscwLayerParams,
    words: Var,
    style_vec: Var,
    half_window: usize,
) -> Var {
    if half_window >= g.shape(words).0 {
        log::debug!("window half-width {half_window} covers the whole {}-word sequence", g.shape(words).0);
    }
    let windows = g.unfold(words, half_window);
    let feat = params.conv.forward(g, store, windows);
    let feat = g.relu(feat);
    let ws = g.param(store, params.w_style);
    let proj = g.matmul_t(ws, style_vec, false, true);
    g.matmul(feat, proj)
}

/// Content scores and attention: `mu_ij = softmax_j(x_i W_c e_j)`,
/// `score_i = Σ_j mu_ij (x_i W_c e_j)`. Returns `(n × 1, n × m)`.
pub fn content_score(g: &mut Graph, store: &ParamStore, params: &JscwLayerParams, words: Var, sents: Var) -> (Var, Var) {
    let wc = g.param(store, params.w_content);
    let xw = g.matmul(words, wc);
    let logits = g.matmul_t(xw, sents, false, true);
    let mu = g.softmax(logits);
    (g.row_dot(mu, logits), mu)
}

/// Two-way softmax over `[content, style]`; returns `(weights, log_weights)` with columns `[beta, alpha]`.
pub fn normalize_pair(g: &mut Graph, content: Var, style: Var) -> (Var, Var) {
    let pair = g.concat_cols(&[content, style]);
    (g.softmax(pair), g.log_softmax(pair))
}

/// Scalar form of [`normalize_pair`]: `(alpha, beta)`.
pub fn normalize_pair_values(content: f64, style: f64) -> (f64, f64) {
    let m = content.max(style);
    let (ec, es) = ((content - m).exp(), (style - m).exp());
    (es / (ec + es), ec / (ec + es))
}

fn weights_from_beta(g: &mut Graph, beta: Var) -> (Var, Var) {
    let n = g.shape(beta).0;
    let ones = g.constant(Tensor::filled(n, 1, 1.0));
    let alpha = g.sub(ones, beta);
    let w = g.concat_cols(&[beta, alpha]);
    (w, g.log(w))
}

impl Jscw {
    /// One weigher layer over `n × d` word states and `m × d` sentence states.
    pub fn layer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        l: usize,
        words: Var,
        sents: Var,
        style_vec: Var,
    ) -> JscwLayerVars {
        let params = &self.layers[l];
        let style = style_score(g, store, params, words, style_vec, self.half_window);
        let (content_score, mu, weights, log_weights, beta) = match self.mode {
            WeighMode::Joint => {
                let (c, mu) = content_score(g, store, params, words, sents);
                let (w, lw) = normalize_pair(g, c, style);
                let beta = g.slice_cols(w, 0, 1);
                (Some(c), Some(mu), w, lw, beta)
            }
            WeighMode::StyleOnly => {
                let beta = g.sigmoid(style);
                let (w, lw) = weights_from_beta(g, beta);
                (None, None, w, lw, beta)
            }
        };
        let (weights, log_weights, beta) = match self.force_beta {
            Some(b) => {
                let n = g.shape(words).0;
                let beta = g.constant(Tensor::filled(n, 1, b));
                let (w, lw) = weights_from_beta(g, beta);
                (w, lw, beta)
            }
            None => (weights, log_weights, beta),
        };
        let content_reps = g.mul_col(words, beta);
        JscwLayerVars { style_score: style, content_score, mu, weights, log_weights, beta, content_reps }
    }

    /// Runs every layer over the encoded marked sequence `states` (`(n+m) × d`).
    pub fn stack(&self, g: &mut Graph, store: &ParamStore, states: Var, layout: &SequenceLayout, style_vec: Var) -> JscwOutput {
        let order = layout.restore_order();
        let mut h = states;
        let mut layers = Vec::with_capacity(self.depth());
        let mut content = h;
        for l in 0..self.depth() {
            let words = g.gather_rows(h, &layout.word_pos);
            let sents = g.gather_rows(h, &layout.sen_pos);
            let vars = self.layer(g, store, l, words, sents, style_vec);
            let cat = g.concat_rows(&[vars.content_reps, sents]);
            content = g.gather_rows(cat, &order);
            layers.push(vars);
            if l + 1 < self.depth() {
                h = self.refine[l].forward(g, store, content, None, None);
            }
        }
        JscwOutput { content, layers }
    }
}

impl JscwOutput {
    pub fn trace(&self, g: &Graph) -> JscwTrace {
        self.layers
            .iter()
            .map(|v| {
                let w = g.value(v.weights);
                JscwLayerTrace {
                    style_score: g.value(v.style_score).data().to_vec(),
                    content_score: v.content_score.map(|c| g.value(c).data().to_vec()),
                    mu: v.mu.map(|m| g.value(m).clone()),
                    weights: AttributeWeights {
                        beta: (0..w.rows()).map(|i| w.get(i, 0)).collect(),
                        alpha: (0..w.rows()).map(|i| w.get(i, 1)).collect(),
                    },
                    content_reps: g.value(v.content_reps).clone(),
                }
            })
            .collect()
    }
}
