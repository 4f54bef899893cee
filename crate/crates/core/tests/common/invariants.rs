//! Property checks shared by the module test suites and the acceptance run.
//! Each returns a one-line summary on success.

use std::sync::Arc;

use longstyle::classifiers::{ClassifierInput, Granularity};
use longstyle::corpus::{generate_synthetic, insert_sen_markers, marker_fraction, SynthSpec, TokenRole, SEN};
use longstyle::evalkit::{bleu_n, overall_metrics, transfer_accuracy};
use longstyle::generator::SwapPlan;
use longstyle::jscw::{style_score, Jscw, WeighMode};
use longstyle::objectives::{compute_losses, disentanglement_penalty_values, LossConfig, StepInputs};
use longstyle::runner::{load_checkpoint, save_checkpoint, train, transfer_all, RunConfig, TrainOptions};
use longstyle::substrate::{
    causal_mask, grad_check, GradCheckOptions, Graph, Linear, MultiHeadAttention, ParamId, ParamStore, Tensor, TransformerLayer, Var,
};
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---- substrate ----

/// Random values in ±[0.1, 1], away from the rectifier kink.
fn kinkless(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// `sum(v ⊙ W)` with fixed pseudo-random weights.
fn probe(g: &mut Graph, v: Var, seed: u64) -> Var {
    let (r, c) = g.shape(v);
    let mut rng = rng(seed ^ 0xfeed);
    let w = g.constant(Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    let p = g.mul(v, w);
    g.sum(p)
}

type OpFn = fn(&mut Graph, &[Var]) -> Var;

fn op_cases() -> Vec<(&'static str, Vec<(usize, usize)>, OpFn)> {
    vec![
        ("matmul", vec![(3, 4), (4, 2)], |g, p| g.matmul(p[0], p[1])),
        ("matmul_ta", vec![(4, 3), (4, 2)], |g, p| g.matmul_t(p[0], p[1], true, false)),
        ("matmul_tb", vec![(3, 4), (2, 4)], |g, p| g.matmul_t(p[0], p[1], false, true)),
        ("add", vec![(3, 4), (3, 4)], |g, p| g.add(p[0], p[1])),
        ("sub", vec![(3, 4), (3, 4)], |g, p| g.sub(p[0], p[1])),
        ("mul", vec![(3, 4), (3, 4)], |g, p| g.mul(p[0], p[1])),
        ("add_row", vec![(3, 4), (1, 4)], |g, p| g.add_row(p[0], p[1])),
        ("mul_col", vec![(3, 4), (3, 1)], |g, p| g.mul_col(p[0], p[1])),
        ("scale", vec![(3, 4)], |g, p| g.scale(p[0], -1.7)),
        ("add_scalar", vec![(3, 4)], |g, p| {
            let a = g.add_scalar(p[0], 0.3);
            g.mul(a, a)
        }),
        ("relu", vec![(3, 4)], |g, p| g.relu(p[0])),
        ("gelu", vec![(3, 4)], |g, p| g.gelu(p[0])),
        ("exp", vec![(3, 4)], |g, p| g.exp(p[0])),
        ("log", vec![(3, 4)], |g, p| {
            let sq = g.mul(p[0], p[0]);
            let pos = g.add_scalar(sq, 0.5);
            g.log(pos)
        }),
        ("sigmoid", vec![(3, 4)], |g, p| g.sigmoid(p[0])),
        ("softmax", vec![(3, 4)], |g, p| g.softmax(p[0])),
        ("softmax_masked", vec![(3, 4)], |g, p| {
            let mask = Arc::new(vec![true, false, true, true, false, true, false, false, true, true, true, false]);
            g.softmax_masked(p[0], Some(mask))
        }),
        ("log_softmax", vec![(3, 4)], |g, p| g.log_softmax(p[0])),
        ("layer_norm", vec![(3, 4), (1, 4), (1, 4)], |g, p| g.layer_norm(p[0], p[1], p[2])),
        ("transpose", vec![(3, 4)], |g, p| g.transpose(p[0])),
        ("slice_rows", vec![(4, 3)], |g, p| g.slice_rows(p[0], 1, 2)),
        ("slice_cols", vec![(3, 5)], |g, p| g.slice_cols(p[0], 1, 3)),
        ("concat_rows", vec![(2, 3), (3, 3)], |g, p| g.concat_rows(&[p[0], p[1]])),
        ("concat_cols", vec![(3, 2), (3, 3)], |g, p| g.concat_cols(&[p[0], p[1]])),
        ("gather_rows", vec![(3, 4)], |g, p| g.gather_rows(p[0], &[2, 0, 2, 1])),
        ("unfold", vec![(5, 2)], |g, p| g.unfold(p[0], 1)),
        ("sum", vec![(3, 4)], |g, p| {
            let s = g.sum(p[0]);
            g.mul(s, s)
        }),
        ("mean_rows", vec![(3, 4)], |g, p| g.mean_rows(p[0])),
        ("row_dot", vec![(3, 4), (3, 4)], |g, p| g.row_dot(p[0], p[1])),
        ("l2_normalize_rows", vec![(3, 4)], |g, p| g.l2_normalize_rows(p[0])),
        ("nll", vec![(3, 4)], |g, p| {
            let lp = g.log_softmax(p[0]);
            g.nll(lp, vec![(0, 1, 1.0), (1, 3, 0.5), (2, 0, 2.0)])
        }),
        ("add_all", vec![(3, 4), (3, 4)], |g, p| g.add_all(&[p[0], p[1], p[0]])),
    ]
}

/// Every graph op and the attention/Transformer layers pass a central
/// difference check at 1e-3 over `seeds` seeds.
pub fn op_gradients(seeds: u64) -> Check {
    let mut worst: (f64, &str) = (0.0, "");
    let mut checked = 0usize;
    for seed in 0..seeds {
        for (name, shapes, f) in op_cases() {
            let mut r = rng(seed * 131 + name.len() as u64);
            let mut store = ParamStore::new();
            let ids: Vec<ParamId> =
                shapes.iter().enumerate().map(|(i, &(a, b))| store.add(format!("p{i}"), kinkless(&mut r, a, b)).unwrap()).collect();
            let rep = grad_check(
                &mut store,
                |s| {
                    let mut g = Graph::new();
                    let ps: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
                    let out = f(&mut g, &ps);
                    let l = probe(&mut g, out, seed);
                    Ok((g, l))
                },
                &GradCheckOptions::default(),
            )
            .map_err(err)?;
            checked += 1;
            if rep.max_rel_error() > worst.0 {
                worst = (rep.max_rel_error(), name);
            }
            ensure(rep.passed(), || format!("{name} seed {seed}: rel error {:.3e}", rep.max_rel_error()))?;
        }
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 4, 3, true, &mut r).map_err(err)?;
        let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut r).map_err(err)?;
        let tl = TransformerLayer::new(&mut store, "tl", 4, 2, 8, true, &mut r).map_err(err)?;
        let x = store.add("x", kinkless(&mut r, 5, 4)).map_err(err)?;
        let mem = store.add("mem", kinkless(&mut r, 3, 4)).map_err(err)?;
        let rep = grad_check(
            &mut store,
            |s| {
                let mut g = Graph::new();
                let (xv, mv) = (g.param(s, x), g.param(s, mem));
                let mask = causal_mask(5);
                let a = lin.forward(&mut g, s, xv);
                let b = mha.forward(&mut g, s, xv, xv, Some(&mask));
                let c = tl.forward(&mut g, s, xv, Some(&mask), Some(mv));
                let (pa, pb, pc) = (probe(&mut g, a, seed), probe(&mut g, b, seed + 1), probe(&mut g, c, seed + 2));
                let l = g.add_all(&[pa, pb, pc]);
                Ok((g, l))
            },
            &GradCheckOptions::default(),
        )
        .map_err(err)?;
        checked += 1;
        ensure(rep.passed(), || format!("layers seed {seed}: rel error {:.3e}", rep.max_rel_error()))?;
    }
    Ok(format!("{checked} op checks over {seeds} seeds, worst {:.2e} ({})", worst.0, worst.1))
}

pub fn softmax_rows() -> Check {
    let mut r = rng(5);
    for _ in 0..200 {
        let (rows, cols) = (r.gen_range(1..6), r.gen_range(1..9));
        let logits = Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-30.0..30.0)).collect());
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| r.gen_bool(0.7)).collect();
        for i in 0..rows {
            mask[i * cols + r.gen_range(0..cols)] = true;
        }
        let mut g = Graph::new();
        let x = g.constant(logits);
        let p = g.softmax_masked(x, Some(Arc::new(mask.clone())));
        let v = g.value(p);
        for i in 0..rows {
            let s: f64 = v.row(i).iter().sum();
            ensure((s - 1.0).abs() <= 1e-6, || format!("row sum {s}"))?;
            for j in 0..cols {
                ensure(mask[i * cols + j] || v.get(i, j) == 0.0, || "masked entry not exactly 0".into())?;
            }
        }
    }
    Ok("200 random masked softmaxes".into())
}

/// Shifting a sequence by `k` rows shifts interior style scores by `k`.
pub fn conv_translation_equivariance() -> Check {
    let mut r = rng(9);
    let (d, h, n, k) = (4, 2, 9, 3);
    let mut store = ParamStore::new();
    let j = Jscw::new(&mut store, 1, d, h, 8, WeighMode::Joint, &mut r).map_err(err)?;
    let base = kinkless(&mut r, n, d);
    let prefix = kinkless(&mut r, k, d);
    let mut shifted = prefix.data().to_vec();
    shifted.extend_from_slice(base.data());
    let s = kinkless(&mut r, 1, d);
    let mut g = Graph::new();
    let (x, xs, sv) = (g.constant(base), g.constant(Tensor::from_vec(n + k, d, shifted)), g.constant(s));
    let a = style_score(&mut g, &store, &j.layers[0], x, sv, h);
    let b = style_score(&mut g, &store, &j.layers[0], xs, sv, h);
    for i in h..n - h {
        let (u, v) = (g.value(a).data()[i], g.value(b).data()[i + k]);
        ensure((u - v).abs() < 1e-12, || format!("position {i}: {u} vs {v}"))?;
    }
    Ok(format!("{} interior positions equal after a {k}-row shift", n - 2 * h))
}

// ---- corpus ----

pub fn tokenize_round_trip() -> Check {
    let c = small_corpus(3);
    for d in c.train.iter().chain(&c.test) {
        let text = c.tokenizer.detokenize(&d.tokens, &c.vocab);
        let (t, e) = c.tokenizer.tokenize(&text, &c.vocab);
        ensure(t == d.tokens && e == d.sentence_ends, || format!("round trip failed for {}", d.doc_id))?;
    }
    Ok(format!("{} documents", c.train.len() + c.test.len()))
}

pub fn sen_marker_length() -> Check {
    let mut r = rng(4);
    for _ in 0..500 {
        let k = r.gen_range(1..5);
        let d = random_doc(&mut r, k, 0);
        let m = insert_sen_markers(&d);
        ensure(m.len() == d.tokens.len() + d.sentence_ends.len(), || "length law".into())?;
        let stripped: Vec<_> = m.iter().copied().filter(|&t| t != SEN).collect();
        ensure(stripped == d.tokens, || "stripping markers does not recover tokens".into())?;
    }
    Ok("500 random documents".into())
}

pub fn synthetic_roles() -> Check {
    let spec = SynthSpec::default();
    let c = generate_synthetic(&spec).map_err(err)?;
    for d in c.train.iter().chain(&c.val).chain(&c.test) {
        for &t in &d.tokens {
            match c.roles[t as usize] {
                TokenRole::Content | TokenRole::Terminator => {}
                TokenRole::Marker(s) => ensure(s == d.style, || format!("marker of style {s} in a style {} doc", d.style))?,
                TokenRole::Reserved => return Err("reserved id in a document".into()),
            }
        }
    }
    let f = marker_fraction(&c.train, &c.roles);
    ensure((f - 0.3).abs() <= 0.05, || format!("marker fraction {f}"))?;
    Ok(format!("roles partition the vocabulary; marker fraction {f:.3}"))
}

// ---- jscw ----

pub fn jscw_normalization() -> Check {
    let mut r = rng(6);
    let mut count = 0;
    for seed in 0..5 {
        let m = tiny_model(seed);
        for _ in 0..6 {
            let (k, st) = (r.gen_range(1..4), r.gen_range(0..2));
            let d = random_doc(&mut r, k, st);
            let mut g = Graph::inference();
            let parts = m.content_of(&mut g, &d).map_err(err)?;
            for t in parts.jscw.trace(&g) {
                for (a, b) in t.weights.alpha.iter().zip(&t.weights.beta) {
                    ensure((a + b - 1.0).abs() < 1e-12 && *a > 0.0 && *b > 0.0 && *a < 1.0 && *b < 1.0, || format!("alpha {a} beta {b}"))?;
                    count += 1;
                }
                let mu = t.mu.ok_or("missing mu")?;
                for i in 0..mu.rows() {
                    let s: f64 = mu.row(i).iter().sum();
                    ensure((s - 1.0).abs() < 1e-12 && mu.row(i).iter().all(|&v| v >= 0.0), || format!("mu row sum {s}"))?;
                }
            }
        }
    }
    Ok(format!("{count} token weights; every mu row stochastic"))
}

pub fn jscw_bilinearity() -> Check {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let j = Jscw::new(&mut store, 1, 4, 1, 8, WeighMode::Joint, &mut r).map_err(err)?;
    let x = kinkless(&mut r, 6, 4);
    let s = kinkless(&mut r, 1, 4);
    for c in [0.5, 2.0, 3.7] {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let sv = g.constant(s.clone());
        let scaled = g.scale(sv, c);
        let a = style_score(&mut g, &store, &j.layers[0], xv, sv, 1);
        let b = style_score(&mut g, &store, &j.layers[0], xv, scaled, 1);
        for (u, v) in g.value(a).data().iter().zip(g.value(b).data()) {
            ensure((c * u - v).abs() <= 1e-12 * (1.0 + v.abs()), || format!("c={c}: {u} vs {v}"))?;
        }
    }
    Ok("style scores scale linearly in the style vector".into())
}

pub fn jscw_gradients() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mut m = tiny_model(seed);
        let d = random_doc(&mut rng(seed), 2, 1);
        let mut store = std::mem::replace(&mut m.store, ParamStore::new());
        let rep = grad_check(
            &mut store,
            |s| {
                m.store = s.clone();
                let mut g = Graph::new();
                let parts = m.content_of(&mut g, &d).map_err(|e| longstyle::substrate::SubstrateError::Config(e.to_string()))?;
                let l = probe(&mut g, parts.content, seed);
                let l = g.scale(l, 0.01);
                Ok((g, l))
            },
            &GradCheckOptions { step: 1e-5, max_entries_per_param: Some(4), seed, ..GradCheckOptions::default() },
        )
        .map_err(err)?;
        worst = worst.max(rep.max_rel_error());
        ensure(rep.passed(), || format!("seed {seed}: {:.3e} at {:?}", rep.max_rel_error(), rep.worst().map(|p| (&p.name, p.worst))))?;
    }
    Ok(format!("encoder + weigher stack, worst {worst:.2e}"))
}

// ---- generator ----

pub fn swap_multiset_and_rate() -> Check {
    let mut r = rng(12);
    let m = tiny_model(0);
    for _ in 0..1000 {
        let n = r.gen_range(1..12);
        let (p, k) = (r.gen_range(0.0..=1.0), r.gen_range(1..4));
        let plan = SwapPlan::sample(n, p, k, &mut r);
        let mut g = Graph::new();
        let z = g.constant(kinkless(&mut r, n + 1, 4));
        let zn = m.corrupt_swap(&mut g, z, &plan);
        let key = |t: &Tensor, i: usize| t.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(g.value(zn).row(0) == g.value(z).row(0), || "style row moved".into())?;
        let mut a: Vec<_> = (1..=n).map(|i| key(g.value(z), i)).collect();
        let mut b: Vec<_> = (1..=n).map(|i| key(g.value(zn), i)).collect();
        a.sort();
        b.sort();
        ensure(a == b, || "row multiset changed".into())?;
    }
    let (n, trials) = (20, 10_000);
    let swaps: usize = (0..trials).map(|_| SwapPlan::sample(n, 0.3, 2, &mut r).swaps).sum();
    let rate = swaps as f64 / (n * trials) as f64;
    ensure((rate - 0.3).abs() <= 0.02, || format!("swap rate {rate}"))?;
    Ok(format!("multiset preserved in 1000 trials; swap rate {rate:.4} at p = 0.3"))
}

pub fn causal_law() -> Check {
    let mut r = rng(13);
    for seed in 0..5 {
        let m = tiny_model(seed);
        let d = random_doc(&mut r, 2, 0);
        let mut g = Graph::inference();
        let parts = m.content_of(&mut g, &d).map_err(err)?;
        let z = m.fuse_style(&mut g, parts.content, 1).map_err(err)?;
        let base = m.ar_teacher_forced(&mut g, z, &d.tokens);
        let n = d.tokens.len();
        let j = r.gen_range(0..n);
        let mut changed = d.tokens.clone();
        changed[j] = if changed[j] == 6 { 7 } else { 6 };
        let alt = m.ar_teacher_forced(&mut g, z, &changed);
        let (a, b) = (g.value(base), g.value(alt));
        for t in 0..=j {
            ensure(a.row(t) == b.row(t), || format!("row {t} changed after editing token {j}"))?;
        }
        ensure(a.row(j + 1) != b.row(j + 1), || "later row unchanged".into())?;
    }
    Ok("logits at t ignore reference tokens after t".into())
}

pub fn nar_parallel() -> Check {
    let m = tiny_model(2);
    let d = random_doc(&mut rng(14), 3, 0);
    let n = d.tokens.len();
    let mut g = Graph::inference();
    let parts = m.content_of(&mut g, &d).map_err(err)?;
    let z = m.fuse_style(&mut g, parts.content, 0).map_err(err)?;
    let a = m.nar_decode(&mut g, z, z, n);
    let mut zt = g.value(z).clone();
    for v in zt.row_mut(n) {
        *v += 0.5;
    }
    let zn = g.constant(zt);
    let b = m.nar_decode(&mut g, z, zn, n);
    ensure(g.shape(a).0 == n, || "output length".into())?;
    ensure(g.value(a).row(0) != g.value(b).row(0), || "first position ignores the last row".into())?;
    Ok(format!("{n} positions decoded in one pass; position 1 sees position {n}"))
}

pub fn nar_absent_at_inference() -> Check {
    let m = tiny_model(3);
    let d = random_doc(&mut rng(15), 2, 1);
    let mut g = Graph::inference();
    m.transfer_in(&mut g, &d, 0).map_err(err)?;
    let used = g.params_used();
    let nar_ids: std::collections::HashSet<ParamId> = m.store.iter().filter(|(_, p)| p.name.starts_with("nar.")).map(|(id, _)| id).collect();
    let nar: Vec<_> = used.iter().filter(|id| nar_ids.contains(id)).collect();
    ensure(nar.is_empty(), || format!("{} NAR parameters read at inference", nar.len()))?;
    let mut t = Graph::new();
    let inputs = StepInputs {
        doc: &d,
        target: 0,
        positive: &d.tokens,
        plan_rec: SwapPlan::identity(d.tokens.len()),
        plan_transfer: SwapPlan::identity(d.tokens.len()),
    };
    let (cd, cs) = (tiny_classifier(Granularity::Document, 1), tiny_classifier(Granularity::Sentence, 2));
    compute_losses(&mut t, &m, &cd, &cs, &inputs, &LossConfig::default()).map_err(err)?;
    let train_nar = t.params_used().iter().filter(|id| nar_ids.contains(id)).count();
    ensure(train_nar > 0, || "training graph has no NAR parameters".into())?;
    Ok(format!("inference graph reads {} parameters, none from the NAR stack (training reads {train_nar})", used.len()))
}

pub fn fuse_row_zero() -> Check {
    let mut m = tiny_model(4);
    let d = random_doc(&mut rng(16), 2, 0);
    let mut g = Graph::inference();
    let parts = m.content_of(&mut g, &d).map_err(err)?;
    let z0 = m.fuse_style(&mut g, parts.content, 0).map_err(err)?;
    let z1 = m.fuse_style(&mut g, parts.content, 1).map_err(err)?;
    ensure(g.value(z0).row(0) != g.value(z1).row(0), || "row 0 ignores the target style".into())?;
    ensure(g.shape(z0).0 == d.tokens.len() + 1, || "row count".into())?;
    m.fusion.set_identity(true);
    for t in 0..2 {
        let mut g = Graph::inference();
        let parts = m.content_of(&mut g, &d).map_err(err)?;
        let z = m.fuse_style(&mut g, parts.content, t).map_err(err)?;
        ensure(g.value(z).row(0) == m.store.value(m.styles).row(t), || "row 0 is not the style embedding".into())?;
        for i in 0..d.tokens.len() {
            ensure(g.value(z).row(i + 1) == g.value(parts.content).row(i), || "content rows altered".into())?;
        }
    }
    Ok("row 0 is exactly the target style embedding".into())
}

// ---- classifiers ----

pub fn frozen_checksums() -> Check {
    let cfg = small_run_config();
    let corpus = small_corpus(21);
    let (cd, cs) = small_classifiers(&cfg, &corpus);
    let before = (cd.checksum(), cs.checksum());
    train(&cfg, &corpus, &cd, &cs, &TrainOptions { max_steps: Some(3), ..Default::default() }).map_err(err)?;
    ensure(before == (cd.checksum(), cs.checksum()), || "classifier parameters changed".into())?;
    Ok(format!("checksums {}.. unchanged after training", &before.0[..8]))
}

pub fn soft_hard_consistency() -> Check {
    let mut r = rng(17);
    for gran in [Granularity::Document, Granularity::Sentence] {
        let c = tiny_classifier(gran, 3);
        for _ in 0..20 {
            let toks: Vec<u32> = (0..r.gen_range(1..9)).map(|_| r.gen_range(5..16)).collect();
            let mut oh = Tensor::zeros(toks.len(), 16);
            for (i, &t) in toks.iter().enumerate() {
                oh.set(i, t as usize, 1.0);
            }
            let mut g = Graph::inference();
            let hard = c.forward(&mut g, ClassifierInput::Tokens(&toks)).map_err(err)?;
            let ohv = g.constant(oh);
            let soft = c.forward(&mut g, ClassifierInput::Soft(ohv)).map_err(err)?;
            ensure(g.value(hard.log_probs) == g.value(soft.log_probs), || "one-hot soft input differs from tokens".into())?;
        }
    }
    Ok("40 one-hot inputs bitwise equal to token inputs".into())
}

// ---- objectives ----

pub fn recomposition_bitwise() -> Check {
    let mut r = rng(18);
    let (cd, cs) = (tiny_classifier(Granularity::Document, 1), tiny_classifier(Granularity::Sentence, 2));
    for seed in 0..4 {
        let m = tiny_model(seed);
        let d = random_doc(&mut r, 3, 0);
        let pos = random_doc(&mut r, 1, 1);
        let cfg = LossConfig { lambda1: r.gen_range(0.0..1.0), lambda2: r.gen_range(0.0..2.0), lambda3: r.gen_range(0.0..2.0), ..LossConfig::default() };
        let n = d.tokens.len();
        let inputs = StepInputs {
            doc: &d,
            target: 1,
            positive: &pos.tokens,
            plan_rec: SwapPlan::sample(n, 0.3, 2, &mut r),
            plan_transfer: SwapPlan::sample(n, 0.3, 2, &mut r),
        };
        let mut g = Graph::new();
        let (b, _) = compute_losses(&mut g, &m, &cd, &cs, &inputs, &cfg).map_err(err)?;
        let v = b.values(&g);
        ensure(v.recompose(&cfg).to_bits() == v.total.to_bits(), || format!("{} vs {}", v.recompose(&cfg), v.total))?;
    }
    Ok("total equals the weighted sum of its components bit for bit".into())
}

fn entropy(a: f64) -> f64 {
    let b = 1.0 - a;
    -(a * a.ln() + b * b.ln())
}

pub fn hinge_law() -> Check {
    let mut r = rng(19);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let eps = r.gen_range(0.01..0.7);
        let n = r.gen_range(1..6);
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let a: f64 = r.gen_range(1e-4..1.0 - 1e-4);
                (a, 1.0 - a)
            })
            .collect();
        let direct: f64 = pairs.iter().map(|&(a, _)| (eps - entropy(a)).max(0.0)).sum();
        let got = disentanglement_penalty_values(&pairs, eps);
        worst = worst.max((got - direct).abs());
        ensure((got - direct).abs() <= 1e-9, || format!("{got} vs {direct}"))?;
        let all_above = pairs.iter().all(|&(a, _)| entropy(a) >= eps);
        ensure((got == 0.0) == all_above, || "penalty is zero iff every entropy reaches epsilon".into())?;
    }
    Ok(format!("1000 random weight sets, max deviation {worst:.1e}"))
}

// ---- evalkit ----

/// Published (acc_d, bleu1, bleu2, bsf1) inputs with their (g_bl_d, g_bs_d) results.
pub const PUBLISHED_CELLS: [(f64, f64, f64, f64, f64, f64); 3] = [
    (41.6, 27.0, 12.4, 63.5, 28.6, 51.4),
    (74.9, 27.3, 11.4, 65.9, 38.1, 70.2),
    (60.3, 27.3, 10.6, 83.6, 33.8, 71.0),
];

pub fn table2_cells() -> Check {
    let mut worst: f64 = 0.0;
    for (acc, b1, b2, bs, gbl, gbs) in PUBLISHED_CELLS {
        let (a, b) = overall_metrics(acc, b1, b2, bs).map_err(err)?;
        worst = worst.max((a - gbl).abs()).max((b - gbs).abs());
        ensure((a - gbl).abs() <= 0.1 && (b - gbs).abs() <= 0.1, || format!("({acc}, {b1}, {b2}, {bs}) -> {a:.2}, {b:.2}"))?;
    }
    Ok(format!("6 cells within 0.1 (max deviation {worst:.3})"))
}

/// Independent BLEU: n-grams counted by nested loops.
pub fn brute_force_bleu(cands: &[Vec<u32>], refs: &[Vec<u32>], n: usize) -> f64 {
    let count = |seq: &[u32], g: &[u32]| -> usize {
        if seq.len() < g.len() {
            return 0;
        }
        (0..=seq.len() - g.len()).filter(|&i| seq[i..i + g.len()] == *g).count()
    };
    let (mut c_len, mut r_len) = (0usize, 0usize);
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    for (c, r) in cands.iter().zip(refs) {
        c_len += c.len();
        r_len += r.len();
        for k in 1..=n {
            if c.len() < k {
                continue;
            }
            let mut seen: Vec<&[u32]> = Vec::new();
            for i in 0..=c.len() - k {
                let g = &c[i..i + k];
                total[k - 1] += 1;
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                matched[k - 1] += count(c, g).min(count(r, g));
            }
        }
    }
    if c_len == 0 || total.contains(&0) || matched.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / n as f64;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    100.0 * bp * log_p.exp()
}

pub fn bleu_oracle() -> Check {
    let mut r = rng(20);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..100 {
        let c: Vec<u32> = (0..r.gen_range(0..9)).map(|_| r.gen_range(0..5)).collect();
        let rf: Vec<u32> = (0..r.gen_range(1..9)).map(|_| r.gen_range(0..5)).collect();
        for n in 1..=2 {
            let (a, b) = (bleu_n(std::slice::from_ref(&c), std::slice::from_ref(&rf), n).map_err(err)?, brute_force_bleu(std::slice::from_ref(&c), std::slice::from_ref(&rf), n));
            ensure(a.to_bits() == b.to_bits(), || format!("{c:?} / {rf:?} n={n}: {a} vs {b}"))?;
            ensure((0.0..=100.0).contains(&a), || format!("out of range {a}"))?;
        }
        cands.push(c);
        refs.push(rf);
    }
    for n in 1..=2 {
        let (a, b) = (bleu_n(&cands, &refs, n).map_err(err)?, brute_force_bleu(&cands, &refs, n));
        ensure(a.to_bits() == b.to_bits(), || format!("corpus n={n}: {a} vs {b}"))?;
    }
    Ok("100 pairs and the pooled corpus match bit for bit".into())
}

pub fn accuracy_order_invariance() -> Check {
    let mut r = rng(22);
    let c = tiny_classifier(Granularity::Sentence, 4);
    let mut items: Vec<(Vec<u32>, usize)> =
        (0..30)
            .map(|_| {
                let k = r.gen_range(1..4);
                (random_doc(&mut r, k, 0).tokens, r.gen_range(0..2))
            })
            .collect();
    let acc = |items: &[(Vec<u32>, usize)], sent| {
        let (o, t): (Vec<_>, Vec<_>) = items.iter().cloned().unzip();
        transfer_accuracy(&c, &o, &t, sent, &[5])
    };
    let (d0, s0) = (acc(&items, false).map_err(err)?, acc(&items, true).map_err(err)?);
    for _ in 0..5 {
        items.shuffle(&mut r);
        ensure(acc(&items, false).map_err(err)? == d0 && acc(&items, true).map_err(err)? == s0, || "order changed accuracy".into())?;
    }
    Ok(format!("document {d0:.1} / sentence {s0:.1} stable under 5 shuffles"))
}

// ---- runner ----

pub fn config_validation() -> Check {
    let bad = ["lambda1 = -0.1", "lambda2 = -1.0", "lambda3 = -2.0", "swap_p = 1.5", "swap_p = -0.1", "swap_k = 0", "epsilon = 0.0", "tau = 0.0", "tau = -1.0"];
    for b in bad {
        ensure(RunConfig::from_toml(b).is_err(), || format!("accepted `{b}`"))?;
    }
    ensure(RunConfig::from_toml("swap_p = 1.0\nlambda1 = 0.0").is_ok(), || "rejected a boundary value".into())?;
    Ok(format!("{} invalid configurations rejected", bad.len()))
}

pub fn checkpoint_round_trip() -> Check {
    let cfg = small_run_config();
    let corpus = small_corpus(23);
    let (cd, cs) = small_classifiers(&cfg, &corpus);
    let out = train(&cfg, &corpus, &cd, &cs, &TrainOptions { max_steps: Some(2), ..Default::default() }).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let p = dir.path().join("m.json");
    save_checkpoint(&p, &out.model, &cfg, None).map_err(err)?;
    let (loaded, lcfg) = load_checkpoint(&p).map_err(err)?;
    ensure(lcfg == cfg, || "config changed".into())?;
    ensure(loaded.store.checksum() == out.model.store.checksum(), || "parameters changed".into())?;
    let (a, b) = (transfer_all(&out.model, &corpus.test).map_err(err)?, transfer_all(&loaded, &corpus.test).map_err(err)?);
    ensure(a == b, || "transfers differ after reload".into())?;
    Ok(format!("{} transfers identical after reload", a.len()))
}

fn pipeline_metrics(seed: u64) -> Result<Vec<f64>, String> {
    let mut cfg = small_run_config();
    cfg.seed = seed;
    let corpus = small_corpus(24);
    let (cd, cs) = small_classifiers(&cfg, &corpus);
    let out = train(&cfg, &corpus, &cd, &cs, &TrainOptions { validate: true, ..Default::default() }).map_err(err)?;
    let r = longstyle::runner::evaluate_split(&out.model, &corpus.test, &corpus, &cd, &cs, &cfg).map_err(err)?;
    Ok(vec![r.acc_d, r.acc_s, r.bleu1, r.bleu2, r.bsf1, r.g_bl_d, r.g_bs_d, out.epoch_means[0]])
}

pub fn pipeline_determinism() -> Check {
    let (a, b) = (pipeline_metrics(7)?, pipeline_metrics(7)?);
    let round = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>();
    ensure(round(&a) == round(&b), || format!("{a:?} vs {b:?}"))?;
    Ok("two identical runs agree to 3 decimals".into())
}

/// Every invariant check, in a fixed order.
pub fn all() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        ("op gradients (20 seeds)", || op_gradients(20)),
        ("softmax rows", softmax_rows),
        ("convolution translation equivariance", conv_translation_equivariance),
        ("tokenize round trip", tokenize_round_trip),
        ("marker insertion length", sen_marker_length),
        ("synthetic role map", synthetic_roles),
        ("alpha + beta = 1, mu row-stochastic", jscw_normalization),
        ("style score bilinearity", jscw_bilinearity),
        ("weigher stack gradients", jscw_gradients),
        ("swap multiset and rate", swap_multiset_and_rate),
        ("causal mask law", causal_law),
        ("NAR parallel contract", nar_parallel),
        ("no NAR at inference", nar_absent_at_inference),
        ("fusion row 0", fuse_row_zero),
        ("frozen classifier checksums", frozen_checksums),
        ("one-hot soft/hard consistency", soft_hard_consistency),
        ("loss recomposition", recomposition_bitwise),
        ("entropy hinge law", hinge_law),
        ("overall metric cells", table2_cells),
        ("BLEU oracle", bleu_oracle),
        ("accuracy order invariance", accuracy_order_invariance),
        ("config validation", config_validation),
        ("checkpoint round trip", checkpoint_round_trip),
        ("pipeline determinism", pipeline_determinism),
    ]
}
