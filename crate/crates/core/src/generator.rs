//! The encoder, style fusion, the autoregressive decoder and the denoising
//! non-autoregressive decoder.
//!
//! All token embeddings share one table, which also serves (transposed) as the
//! output projection. Generated text can be kept soft: a row-stochastic matrix
//! over the vocabulary whose expected embeddings feed the next stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{StyleId, StyledDoc, TokenId, BOS, EOS, PAD, SEN, UNK};
use crate::jscw::{Jscw, JscwOutput, SequenceLayout, WeighMode};
use crate::substrate::{causal_mask, Graph, ParamId, ParamStore, SubstrateError, Tensor, TransformerStack, Var};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error("sequence has no sentence marker")]
    NoSentenceMarker,
    #[error("unknown style id {0}")]
    UnknownStyle(StyleId),
    #[error("empty sequence")]
    Empty,
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Where neighbour-swap corruption is applied before the NAR decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Permute rows of the fused representation.
    #[default]
    Rows,
    /// Permute source tokens and start the NAR stack from their embeddings.
    Tokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_styles: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub nar_layers: usize,
    pub fusion_layers: usize,
    pub jscw_layers: usize,
    pub half_window: usize,
    /// Longest token sequence (without markers) the model accepts or generates.
    pub max_len: usize,
    pub weigh_mode: WeighMode,
    pub corruption: CorruptionMode,
    /// Token ids that close a sentence in generated text.
    pub terminators: Vec<TokenId>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            num_styles: 2,
            d: 64,
            heads: 2,
            ffn_hidden: 128,
            enc_layers: 2,
            dec_layers: 2,
            nar_layers: 6,
            fusion_layers: 2,
            jscw_layers: 3,
            half_window: 2,
            max_len: 128,
            weigh_mode: WeighMode::Joint,
            corruption: CorruptionMode::Rows,
            terminators: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: &str| Err(GeneratorError::Config(m.to_string()));
        if self.vocab_size <= SEN as usize {
            return bad("vocab_size must exceed the reserved ids");
        }
        if self.num_styles < 2 {
            return bad("at least two styles are required");
        }
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad("d must be a positive multiple of heads");
        }
        if self.jscw_layers == 0 || self.enc_layers == 0 || self.dec_layers == 0 || self.nar_layers == 0 {
            return bad("layer counts must be positive");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        if self.terminators.iter().any(|&t| t as usize >= self.vocab_size) {
            return bad("terminator id outside the vocabulary");
        }
        Ok(())
    }
}

/// Neighbour-swap corruption settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub p: f64,
    pub k: usize,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        if !(0.0..=1.0).contains(&self.p) || self.k < 1 {
            return Err(GeneratorError::Config(format!("corruption needs p in [0,1] and k >= 1, got p={} k={}", self.p, self.k)));
        }
        Ok(())
    }
}

/// A sampled neighbour-swap permutation of `n` content rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwapPlan {
    /// `order[i]` is the source row placed at position `i`.
    pub order: Vec<usize>,
    /// Number of rows that initiated a swap.
    pub swaps: usize,
}

impl SwapPlan {
    pub fn identity(n: usize) -> Self {
        Self { order: (0..n).collect(), swaps: 0 }
    }

    /// Scans positions left to right; each initiates, with probability `p`, an
    /// exchange with a uniformly chosen other position within distance `k`.
    pub fn sample<R: Rng>(n: usize, p: f64, k: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        let mut swaps = 0;
        for i in 0..n {
            if !rng.gen_bool(p) {
                continue;
            }
            let (lo, hi) = (i.saturating_sub(k), (i + k).min(n - 1));
            if hi == lo {
                continue;
            }
            let mut j = rng.gen_range(lo..hi);
            if j >= i {
                j += 1;
            }
            order.swap(i, j);
            swaps += 1;
        }
        Self { order, swaps }
    }

    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        self.order.iter().map(|&i| items[i].clone()).collect()
    }
}

/// Encoder states of a marked sequence, split by the layout.
#[derive(Clone, Debug)]
pub struct EncodedDoc {
    /// All `n + m` states in sequence order.
    pub states: Var,
    pub layout: SequenceLayout,
}

impl EncodedDoc {
    pub fn word_states(&self, g: &mut Graph) -> Var {
        g.gather_rows(self.states, &self.layout.word_pos)
    }

    pub fn sent_states(&self, g: &mut Graph) -> Var {
        g.gather_rows(self.states, &self.layout.sen_pos)
    }
}

/// Soft generated text: one distribution over the vocabulary per position.
#[derive(Clone, Debug)]
pub struct SoftSequence {
    /// `T × |V|`, row-stochastic.
    pub probs: Var,
    /// Argmax view.
    pub tokens: Vec<TokenId>,
}

impl SoftSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Splits a token sequence into sentences closed by terminator tokens. Tokens
/// after the last terminator form a final sentence. Returns `(start, len)`
/// spans and whether any terminator was found.
pub fn split_sentences(tokens: &[TokenId], terminators: &[TokenId]) -> (Vec<(usize, usize)>, bool) {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if *t == SEN || terminators.contains(t) {
            spans.push((start, i + 1 - start));
            start = i + 1;
        }
    }
    let found = !spans.is_empty();
    if start < tokens.len() {
        spans.push((start, tokens.len() - start));
    }
    (spans, found)
}

/// Argmax over decodable ids (never PAD, BOS, UNK or SEN).
pub fn decodable_argmax(row: &[f64]) -> TokenId {
    let mut best = EOS as usize;
    for (j, &v) in row.iter().enumerate() {
        if j == PAD as usize || j == BOS as usize || j == UNK as usize || j == SEN as usize {
            continue;
        }
        if v > row[best] {
            best = j;
        }
    }
    best as TokenId
}

/// Intermediate values of one full forward through the transfer path.
#[derive(Clone, Debug)]
pub struct ForwardParts {
    pub encoded: EncodedDoc,
    pub jscw: JscwOutput,
    /// Final content representations, `n × d`.
    pub content: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Token embedding table, `|V| × d`, tied with the output projection.
    pub embed: ParamId,
    pub out_bias: ParamId,
    /// Style embedding table, `|S| × d`.
    pub styles: ParamId,
    pub encoder: TransformerStack,
    pub jscw: Jscw,
    pub fusion: TransformerStack,
    pub ar: TransformerStack,
    pub nar: TransformerStack,
    positions: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, GeneratorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, v, h, f) = (config.d, config.vocab_size, config.heads, config.ffn_hidden);
        let embed = store.add_normal("embed", v, d, 1.0 / (d as f64).sqrt(), &mut rng)?;
        let out_bias = store.add_zeros("out_bias", 1, v)?;
        let styles = store.add_normal("style_embed", config.num_styles, d, 0.02, &mut rng)?;
        let encoder = TransformerStack::new(&mut store, "encoder", config.enc_layers, d, h, f, false, &mut rng)?;
        let jscw = Jscw::new(&mut store, config.jscw_layers, d, config.half_window, f, config.weigh_mode, &mut rng)?;
        let fusion = TransformerStack::new(&mut store, "fusion", config.fusion_layers, d, h, f, false, &mut rng)?;
        let ar = TransformerStack::new(&mut store, "ar", config.dec_layers, d, h, f, true, &mut rng)?;
        let nar = TransformerStack::new(&mut store, "nar", config.nar_layers, d, h, f, true, &mut rng)?;
        // Room for markers, BOS and the lengthened transfer output.
        let positions = crate::substrate::sinusoidal_positions(2 * config.max_len + 8, d);
        Ok(Self { config, store, embed, out_bias, styles, encoder, jscw, fusion, ar, nar, positions })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    fn check_style(&self, s: StyleId) -> Result<(), GeneratorError> {
        if s >= self.config.num_styles {
            return Err(GeneratorError::UnknownStyle(s));
        }
        Ok(())
    }

    fn position_rows(&self, start: usize, len: usize) -> Tensor {
        let d = self.config.d;
        let end = (start + len).min(self.positions.rows());
        let mut t = Tensor::zeros(len, d);
        for (i, p) in (start..end).enumerate() {
            t.row_mut(i).copy_from_slice(self.positions.row(p));
        }
        t
    }

    fn add_positions(&self, g: &mut Graph, x: Var, start: usize) -> Var {
        let n = g.shape(x).0;
        let p = g.constant(self.position_rows(start, n));
        g.add(x, p)
    }

    fn emb_scale(&self) -> f64 {
        (self.config.d as f64).sqrt()
    }

    /// Scaled embeddings of hard tokens, without positions.
    pub fn embed_tokens(&self, g: &mut Graph, ids: &[TokenId]) -> Var {
        let e = g.param(&self.store, self.embed);
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let rows = g.gather_rows(e, &idx);
        g.scale(rows, self.emb_scale())
    }

    /// Expected embeddings of soft tokens (soft-sampling), without positions.
    pub fn embed_soft(&self, g: &mut Graph, probs: Var) -> Var {
        let e = g.param(&self.store, self.embed);
        let rows = g.matmul(probs, e);
        g.scale(rows, self.emb_scale())
    }

    pub fn style_row(&self, g: &mut Graph, style: StyleId) -> Result<Var, GeneratorError> {
        self.check_style(style)?;
        let s = g.param(&self.store, self.styles);
        Ok(g.gather_rows(s, &[style]))
    }

    fn vocab_logits(&self, g: &mut Graph, h: Var) -> Var {
        let e = g.param(&self.store, self.embed);
        let b = g.param(&self.store, self.out_bias);
        let l = g.matmul_t(h, e, false, true);
        g.add_row(l, b)
    }

    fn encode_rows(&self, g: &mut Graph, rows: Var, layout: SequenceLayout) -> EncodedDoc {
        let x = self.add_positions(g, rows, 0);
        let states = self.encoder.forward(g, &self.store, x, None, None);
        EncodedDoc { states, layout }
    }

    /// Encodes a marked token sequence.
    pub fn encode(&self, g: &mut Graph, marked: &[TokenId]) -> Result<EncodedDoc, GeneratorError> {
        let layout = SequenceLayout::from_markers(marked.iter().map(|&t| t == SEN)).ok_or(GeneratorError::NoSentenceMarker)?;
        if layout.num_words() == 0 {
            return Err(GeneratorError::Empty);
        }
        let rows = self.embed_tokens(g, marked);
        Ok(self.encode_rows(g, rows, layout))
    }

    /// Encodes soft text, inserting a hard sentence marker after every position
    /// whose argmax is a terminator (and at the end if the text is left open).
    pub fn encode_soft(&self, g: &mut Graph, soft: &SoftSequence) -> Result<EncodedDoc, GeneratorError> {
        if soft.is_empty() {
            return Err(GeneratorError::Empty);
        }
        let (spans, _) = split_sentences(&soft.tokens, &self.config.terminators);
        let t_len = soft.len();
        let mut order = Vec::with_capacity(t_len + spans.len());
        for &(s, l) in &spans {
            order.extend(s..s + l);
            order.push(t_len);
        }
        let layout = SequenceLayout::from_markers(order.iter().map(|&i| i == t_len)).expect("at least one span");
        let words = self.embed_soft(g, soft.probs);
        let sen = self.embed_tokens(g, &[SEN]);
        let cat = g.concat_rows(&[words, sen]);
        let rows = g.gather_rows(cat, &order);
        Ok(self.encode_rows(g, rows, layout))
    }

    /// Runs the weigher over encoded states, scoring against `style`.
    pub fn weigh(&self, g: &mut Graph, encoded: &EncodedDoc, style: StyleId) -> Result<ForwardParts, GeneratorError> {
        let s = self.style_row(g, style)?;
        let out = self.jscw.stack(g, &self.store, encoded.states, &encoded.layout, s);
        let content = out.layers.last().expect("at least one layer").content_reps;
        Ok(ForwardParts { encoded: encoded.clone(), jscw: out, content })
    }

    /// `Z = MTL([s_target; content])`, `(n+1) × d`.
    pub fn fuse_style(&self, g: &mut Graph, content: Var, target: StyleId) -> Result<Var, GeneratorError> {
        let s = self.style_row(g, target)?;
        let z0 = g.concat_rows(&[s, content]);
        Ok(self.fusion.forward(g, &self.store, z0, None, None))
    }

    fn ar_forward(&self, g: &mut Graph, z: Var, inputs: Var) -> Var {
        let t = g.shape(inputs).0;
        let x = self.add_positions(g, inputs, 0);
        let mask = causal_mask(t);
        let h = self.ar.forward(g, &self.store, x, Some(&mask), Some(z));
        self.vocab_logits(g, h)
    }

    /// Teacher-forced AR logits: inputs are `[BOS, reference...]`, row `t`
    /// predicts `reference[t]`, and the final row predicts EOS.
    pub fn ar_teacher_forced(&self, g: &mut Graph, z: Var, reference: &[TokenId]) -> Var {
        let reference = if reference.len() > self.config.max_len {
            log::warn!("reference of {} tokens truncated to {}", reference.len(), self.config.max_len);
            &reference[..self.config.max_len]
        } else {
            reference
        };
        let mut ids = Vec::with_capacity(reference.len() + 1);
        ids.push(BOS);
        ids.extend_from_slice(reference);
        let inputs = self.embed_tokens(g, &ids);
        self.ar_forward(g, z, inputs)
    }

    /// Teacher-forced AR logits over a soft reference (`T × |V|`).
    pub fn ar_teacher_forced_soft(&self, g: &mut Graph, z: Var, reference: Var) -> Var {
        let bos = self.embed_tokens(g, &[BOS]);
        let rest = self.embed_soft(g, reference);
        let inputs = g.concat_rows(&[bos, rest]);
        self.ar_forward(g, z, inputs)
    }

    /// Free-running soft decode. Each step emits `softmax(logits / temperature)`
    /// and feeds its expected embedding to the next step. Stops before a step
    /// whose argmax is EOS (when `stop_at_eos`), or after `max_len` rows.
    pub fn ar_decode_soft(
        &self,
        g: &mut Graph,
        z: Var,
        max_len: usize,
        temperature: f64,
        stop_at_eos: bool,
    ) -> Result<SoftSequence, GeneratorError> {
        let mut caches = self.ar.new_caches();
        let mut input = self.embed_tokens(g, &[BOS]);
        let mut rows = Vec::new();
        let mut tokens = Vec::new();
        for t in 0..max_len.max(1) {
            let x = self.add_positions(g, input, t);
            let h = self.ar.forward_step(g, &self.store, x, &mut caches, Some(z));
            let logits = self.vocab_logits(g, h);
            let logits = if temperature == 1.0 { logits } else { g.scale(logits, 1.0 / temperature) };
            let p = g.softmax(logits);
            let tok = decodable_argmax(g.value(p).row(0));
            if tok == EOS && stop_at_eos {
                break;
            }
            tokens.push(tok);
            rows.push(p);
            input = self.embed_soft(g, p);
        }
        if rows.is_empty() {
            return Err(GeneratorError::Empty);
        }
        let probs = g.concat_rows(&rows);
        Ok(SoftSequence { probs, tokens })
    }

    /// Hard greedy decode; never emits PAD, BOS, UNK or SEN.
    pub fn greedy_decode(&self, g: &mut Graph, z: Var, max_len: usize) -> Vec<TokenId> {
        let mut caches = self.ar.new_caches();
        let mut prev = BOS;
        let mut out = Vec::new();
        for t in 0..max_len {
            let e = self.embed_tokens(g, &[prev]);
            let x = self.add_positions(g, e, t);
            let h = self.ar.forward_step(g, &self.store, x, &mut caches, Some(z));
            let logits = self.vocab_logits(g, h);
            let tok = decodable_argmax(g.value(logits).row(0));
            if tok == EOS {
                break;
            }
            out.push(tok);
            prev = tok;
        }
        out
    }

    /// Applies a swap plan to the content rows of `z`; row 0 stays in place.
    pub fn corrupt_swap(&self, g: &mut Graph, z: Var, plan: &SwapPlan) -> Var {
        let mut idx = Vec::with_capacity(plan.order.len() + 1);
        idx.push(0);
        idx.extend(plan.order.iter().map(|&i| i + 1));
        g.gather_rows(z, &idx)
    }

    /// Parallel NAR logits, `out_len × |V|`. The self-attention stack starts
    /// from the content rows of `z_noisy`, plus positions.
    pub fn nar_decode(&self, g: &mut Graph, z: Var, z_noisy: Var, out_len: usize) -> Var {
        let init = g.slice_rows(z_noisy, 1, out_len);
        self.nar_from(g, z, init)
    }

    /// NAR logits starting from the embeddings of a token sequence.
    pub fn nar_decode_tokens(&self, g: &mut Graph, z: Var, tokens: &[TokenId]) -> Var {
        let init = self.embed_tokens(g, tokens);
        self.nar_from(g, z, init)
    }

    fn nar_from(&self, g: &mut Graph, z: Var, init: Var) -> Var {
        let x = self.add_positions(g, init, 0);
        let h = self.nar.forward(g, &self.store, x, None, Some(z));
        self.vocab_logits(g, h)
    }

    /// NAR logits for the configured corruption mode.
    pub fn nar_corrupted(&self, g: &mut Graph, z: Var, source: &[TokenId], plan: &SwapPlan) -> Var {
        match self.config.corruption {
            CorruptionMode::Rows => {
                let zn = self.corrupt_swap(g, z, plan);
                self.nar_decode(g, z, zn, source.len())
            }
            CorruptionMode::Tokens => self.nar_decode_tokens(g, z, &plan.apply(source)),
        }
    }

    /// Encoder and weigher for a document under its own style.
    pub fn content_of(&self, g: &mut Graph, doc: &StyledDoc) -> Result<ForwardParts, GeneratorError> {
        let marked = doc.marked();
        let enc = self.encode(g, &marked)?;
        self.weigh(g, &enc, doc.style)
    }

    pub fn generation_limit(&self, source_len: usize) -> usize {
        (((source_len as f64) * 1.2).ceil() as usize).clamp(1, self.config.max_len)
    }

    /// Inference transfer: encode, weigh, fuse with `target`, greedy AR decode.
    pub fn transfer(&self, doc: &StyledDoc, target: StyleId) -> Result<Vec<TokenId>, GeneratorError> {
        self.transfer_in(&mut Graph::inference(), doc, target)
    }

    /// [`Model::transfer`] recording into a caller-supplied graph.
    pub fn transfer_in(&self, g: &mut Graph, doc: &StyledDoc, target: StyleId) -> Result<Vec<TokenId>, GeneratorError> {
        let parts = self.content_of(g, doc)?;
        let z = self.fuse_style(g, parts.content, target)?;
        Ok(self.greedy_decode(g, z, self.generation_limit(doc.tokens.len())))
    }

    /// Mean-pooled original, content and fused vectors of a document.
    pub fn latent_means(&self, doc: &StyledDoc, target: StyleId) -> Result<[Vec<f64>; 3], GeneratorError> {
        let mut g = Graph::inference();
        let parts = self.content_of(&mut g, doc)?;
        let words = parts.encoded.word_states(&mut g);
        let z = self.fuse_style(&mut g, parts.content, target)?;
        let n = doc.tokens.len();
        let fused = g.slice_rows(z, 1, n);
        let mean = |g: &mut Graph, v: Var| {
            let m = g.mean_rows(v);
            g.value(m).data().to_vec()
        };
        Ok([mean(&mut g, words), mean(&mut g, parts.content), mean(&mut g, fused)])
    }
}
