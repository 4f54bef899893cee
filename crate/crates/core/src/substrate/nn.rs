//! Parameterised building blocks: affine maps, layer normalisation,
//! multi-head attention and residual Transformer layers.

use std::sync::Arc;

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::SubstrateError;

pub type Mask = Arc<Vec<bool>>;

/// Lower-triangular attention mask: query `i` may attend to keys `0..=i`.
pub fn causal_mask(n: usize) -> Mask {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    Arc::new(m)
}

/// Fixed sinusoidal position table, `n × d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self, SubstrateError> {
        let w = store.add_uniform(format!("{name}.w"), d_in, d_out, rng)?;
        let b = if bias { Some(store.add_zeros(format!("{name}.b"), 1, d_out)?) } else { None };
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self, SubstrateError> {
        Ok(Self {
            gamma: store.add_filled(format!("{name}.gamma"), 1, d, 1.0)?,
            beta: store.add_zeros(format!("{name}.beta"), 1, d)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Scaled dot-product multi-head attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, SubstrateError> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(SubstrateError::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng)?,
            heads,
            d,
        })
    }

    /// `query` is `n × d`, `memory` is `m × d`; the mask, if any, is `n × m`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, memory: Var, mask: Option<&Mask>) -> Var {
        let (k, v) = self.project_kv(g, store, memory);
        self.attend(g, store, query, k, v, mask)
    }

    /// Key and value projections of `memory`.
    pub fn project_kv(&self, g: &mut Graph, store: &ParamStore, memory: Var) -> (Var, Var) {
        (self.k.forward(g, store, memory), self.v.forward(g, store, memory))
    }

    /// Attention of `query` over already projected keys and values.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, query: Var, k: Var, v: Var, mask: Option<&Mask>) -> Var {
        let q = self.q.forward(g, store, query);
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let scores = g.matmul_t(qh, kh, false, true);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_masked(scores, mask.cloned());
            outs.push(g.matmul(attn, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, store, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, SubstrateError> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, d, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm residual Transformer layer with optional cross-attention.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: Option<MultiHeadAttention>,
    pub ffn: FeedForward,
    pub ln_self: LayerNorm,
    pub ln_cross: Option<LayerNorm>,
    pub ln_ffn: LayerNorm,
    /// Diagnostic: the layer returns its input unchanged.
    pub identity: bool,
}

impl TransformerLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        cross: bool,
        rng: &mut R,
    ) -> Result<Self, SubstrateError> {
        let (cross_attn, ln_cross) = if cross {
            (
                Some(MultiHeadAttention::new(store, &format!("{name}.cross"), d, heads, rng)?),
                Some(LayerNorm::new(store, &format!("{name}.ln_cross"), d)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), d, heads, rng)?,
            cross_attn,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_hidden, rng)?,
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d)?,
            ln_cross,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
            identity: false,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        self_mask: Option<&Mask>,
        memory: Option<Var>,
    ) -> Var {
        if self.identity {
            return x;
        }
        let h = self.ln_self.forward(g, store, x);
        let a = self.self_attn.forward(g, store, h, h, self_mask);
        let mut x = g.add(x, a);
        if let (Some(ca), Some(ln), Some(mem)) = (&self.cross_attn, &self.ln_cross, memory) {
            let h = ln.forward(g, store, x);
            let a = ca.forward(g, store, h, mem, None);
            x = g.add(x, a);
        }
        let h = self.ln_ffn.forward(g, store, x);
        let f = self.ffn.forward(g, store, h);
        g.add(x, f)
    }

    /// Incremental causal step: `x` is the newest `1 × d` row. Keys and values
    /// of earlier rows are read from `cache` and the new row's are appended, so
    /// a sequence of steps equals [`forward`](Self::forward) under a causal mask.
    pub fn forward_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        cache: &mut LayerCache,
        memory: Option<Var>,
    ) -> Var {
        if self.identity {
            return x;
        }
        let h = self.ln_self.forward(g, store, x);
        let (k, v) = self.self_attn.project_kv(g, store, h);
        cache.k = Some(match cache.k {
            Some(prev) => g.concat_rows(&[prev, k]),
            None => k,
        });
        cache.v = Some(match cache.v {
            Some(prev) => g.concat_rows(&[prev, v]),
            None => v,
        });
        let a = self.self_attn.attend(g, store, h, cache.k.unwrap(), cache.v.unwrap(), None);
        let mut x = g.add(x, a);
        if let (Some(ca), Some(ln), Some(mem)) = (&self.cross_attn, &self.ln_cross, memory) {
            let kv = match cache.cross {
                Some(kv) => kv,
                None => {
                    let kv = ca.project_kv(g, store, mem);
                    cache.cross = Some(kv);
                    kv
                }
            };
            let h = ln.forward(g, store, x);
            let a = ca.attend(g, store, h, kv.0, kv.1, None);
            x = g.add(x, a);
        }
        let h = self.ln_ffn.forward(g, store, x);
        let f = self.ffn.forward(g, store, h);
        g.add(x, f)
    }
}

/// Per-layer key/value cache for incremental decoding.
#[derive(Clone, Debug, Default)]
pub struct LayerCache {
    k: Option<Var>,
    v: Option<Var>,
    cross: Option<(Var, Var)>,
}

/// A stack of [`TransformerLayer`]s followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
    pub final_ln: LayerNorm,
    /// Diagnostic: the whole stack returns its input unchanged.
    pub identity: bool,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        depth: usize,
        d: usize,
        heads: usize,
        ffn_hidden: usize,
        cross: bool,
        rng: &mut R,
    ) -> Result<Self, SubstrateError> {
        let layers = (0..depth)
            .map(|i| TransformerLayer::new(store, &format!("{name}.{i}"), d, heads, ffn_hidden, cross, rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { layers, final_ln: LayerNorm::new(store, &format!("{name}.ln_out"), d)?, identity: false })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        self_mask: Option<&Mask>,
        memory: Option<Var>,
    ) -> Var {
        if self.identity {
            return x;
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, store, h, self_mask, memory);
        }
        self.final_ln.forward(g, store, h)
    }

    /// Incremental causal step through every layer; `caches` holds one entry per layer.
    pub fn forward_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        caches: &mut [LayerCache],
        memory: Option<Var>,
    ) -> Var {
        if self.identity {
            return x;
        }
        let mut h = x;
        for (layer, cache) in self.layers.iter().zip(caches.iter_mut()) {
            h = layer.forward_step(g, store, h, cache, memory);
        }
        self.final_ln.forward(g, store, h)
    }

    pub fn new_caches(&self) -> Vec<LayerCache> {
        vec![LayerCache::default(); self.layers.len()]
    }

    pub fn set_identity(&mut self, on: bool) {
        self.identity = on;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn causal_attention_ignores_future_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let layer = TransformerLayer::new(&mut store, "t", 8, 2, 16, false, &mut rng).unwrap();
        let mask = causal_mask(4);
        let base: Vec<f64> = (0..32).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
        let mut changed = base.clone();
        for v in &mut changed[24..] {
            *v += 1.0;
        }
        let run = |data: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_vec(4, 8, data));
            let y = layer.forward(&mut g, &store, x, Some(&mask), None);
            g.value(y).clone()
        };
        let (a, b) = (run(base), run(changed));
        assert_eq!(&a.data()[..24], &b.data()[..24]);
        assert_ne!(&a.data()[24..], &b.data()[24..]);
    }

    #[test]
    fn incremental_steps_match_causal_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let stack = TransformerStack::new(&mut store, "t", 2, 8, 2, 16, true, &mut rng).unwrap();
        let x: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_vec(5, 8, x));
        let mem = g.constant(Tensor::from_vec(3, 8, m));
        let full = stack.forward(&mut g, &store, xv, Some(&causal_mask(5)), Some(mem));
        let mut caches = stack.new_caches();
        for t in 0..5 {
            let row = g.slice_rows(xv, t, 1);
            let y = stack.forward_step(&mut g, &store, row, &mut caches, Some(mem));
            let diff: f64 = g.value(y).row(0).iter().zip(g.value(full).row(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "step {t}: {diff}");
        }
    }

    #[test]
    fn positions_are_distinct() {
        let p = sinusoidal_positions(3, 4);
        assert_ne!(p.row(0), p.row(1));
        assert_eq!(p.get(0, 1), 1.0);
    }
}
