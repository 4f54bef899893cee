//! Automatic evaluation: style-transfer accuracy at document and sentence
//! level, corpus BLEU-1/2 against the source, a static-embedding similarity
//! proxy for BERTScore, geometric overall scores, and report rendering.
//!
//! The BERTScore columns are a proxy: greedy cosine matching over the trained
//! model's token embeddings. They are always labelled `BS-proxy`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifiers::{argmax, ClassifierError, StyleClassifier};
use crate::corpus::{StyleId, StyledDoc, TokenId, TokenRole};
use crate::generator::split_sentences;
use crate::substrate::Tensor;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no outputs to evaluate")]
    NoOutputs,
    #[error("negative metric input {0}")]
    Negative(f64),
    #[error("outputs and sources are misaligned; missing ids: {}", .0.join(", "))]
    MissingIds(Vec<String>),
    #[error("unsupported BLEU order {0}")]
    Order(usize),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with maximum order `n` (uniform weights) and brevity
/// penalty, in percent. Each candidate has one reference.
pub fn bleu_n<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64, EvalError> {
    if n == 0 || n > 4 {
        return Err(EvalError::Order(n));
    }
    let (mut c_len, mut r_len) = (0usize, 0usize);
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for k in 1..=n {
            let cc = ngram_counts(c, k);
            let rc = ngram_counts(r, k);
            for (g, cnt) in &cc {
                matched[k - 1] += (*cnt).min(*rc.get(g).unwrap_or(&0));
                total[k - 1] += cnt;
            }
        }
    }
    if c_len == 0 || total.contains(&0) || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / n as f64;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(100.0 * bp * log_p.exp())
}

/// Percentage of units whose predicted style equals the target. Document
/// granularity classifies whole outputs; sentence granularity splits every
/// output at terminators. An empty output counts as a miss.
pub fn transfer_accuracy(
    classifier: &StyleClassifier,
    outputs: &[Vec<TokenId>],
    targets: &[StyleId],
    sentence_level: bool,
    terminators: &[TokenId],
) -> Result<f64, EvalError> {
    if outputs.is_empty() {
        return Err(EvalError::NoOutputs);
    }
    let (mut hits, mut units) = (0usize, 0usize);
    for (out, &t) in outputs.iter().zip(targets) {
        if out.is_empty() {
            units += 1;
            continue;
        }
        if sentence_level {
            for (s, l) in split_sentences(out, terminators).0 {
                units += 1;
                if classifier.predict(&out[s..s + l])? == t {
                    hits += 1;
                }
            }
        } else {
            units += 1;
            if classifier.predict(out)? == t {
                hits += 1;
            }
        }
    }
    Ok(100.0 * hits as f64 / units as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// BS-proxy `(P, R, F1)` in percent: greedy cosine matching over static embeddings.
pub fn bertscore_proxy(candidate: &[TokenId], reference: &[TokenId], table: &Tensor) -> (f64, f64, f64) {
    if candidate.is_empty() || reference.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let row = |t: TokenId| table.row(t as usize);
    let best = |from: &[TokenId], to: &[TokenId]| {
        from.iter()
            .map(|&a| to.iter().map(|&b| cosine(row(a), row(b))).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / from.len() as f64
    };
    let p = best(candidate, reference);
    let r = best(reference, candidate);
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (100.0 * p, 100.0 * r, 100.0 * f)
}

/// `(G-BL_d, G-BS_d)` from percentage inputs.
pub fn overall_metrics(acc_d: f64, bleu1: f64, bleu2: f64, bsf1: f64) -> Result<(f64, f64), EvalError> {
    for v in [acc_d, bleu1, bleu2, bsf1] {
        if v < 0.0 {
            return Err(EvalError::Negative(v));
        }
    }
    Ok(((acc_d * (bleu1 + bleu2) / 2.0).sqrt(), (acc_d * bsf1).sqrt()))
}

/// Fraction of the source's content tokens (as a multiset) present in the output.
pub fn content_recall(source: &[TokenId], output: &[TokenId], roles: &[TokenRole]) -> (usize, usize) {
    let is_content = |t: &TokenId| roles.get(*t as usize) == Some(&TokenRole::Content);
    let mut avail: HashMap<TokenId, usize> = HashMap::new();
    for t in output.iter().filter(|t| is_content(t)) {
        *avail.entry(*t).or_insert(0) += 1;
    }
    let (mut hit, mut total) = (0, 0);
    for t in source.iter().filter(|t| is_content(t)) {
        total += 1;
        if let Some(c) = avail.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                hit += 1;
            }
        }
    }
    (hit, total)
}

/// Corpus-level content recall over aligned pairs.
pub fn corpus_content_recall(sources: &[Vec<TokenId>], outputs: &[Vec<TokenId>], roles: &[TokenRole]) -> f64 {
    let (mut h, mut t) = (0, 0);
    for (s, o) in sources.iter().zip(outputs) {
        let (a, b) = content_recall(s, o, roles);
        h += a;
        t += b;
    }
    if t == 0 {
        0.0
    } else {
        h as f64 / t as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocEval {
    pub id: String,
    pub target_style: StyleId,
    pub predicted_style: Option<StyleId>,
    pub bleu1: f64,
    pub bsf1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub acc_d: f64,
    pub acc_s: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bsp: f64,
    pub bsr: f64,
    pub bsf1: f64,
    pub g_bl_d: f64,
    pub g_bs_d: f64,
    /// Present when ground-truth token roles are known.
    pub content_recall: Option<f64>,
    pub per_doc: Vec<DocEval>,
    pub config_fingerprint: String,
}

/// One evaluated pair: the source document, its output, the target style.
#[derive(Clone, Debug)]
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub source: &'a [TokenId],
    pub output: &'a [TokenId],
    pub target: StyleId,
}

pub struct EvalContext<'a> {
    pub doc_classifier: &'a StyleClassifier,
    pub sent_classifier: &'a StyleClassifier,
    pub embeddings: &'a Tensor,
    pub terminators: &'a [TokenId],
    pub roles: Option<&'a [TokenRole]>,
    pub config_fingerprint: String,
}

/// Matches outputs to sources by id; every source needs an output and vice versa.
pub fn align<'a, T>(
    outputs: &'a [(String, T)],
    sources: &'a [StyledDoc],
) -> Result<Vec<(&'a StyledDoc, &'a T)>, EvalError> {
    let by_id: HashMap<&str, &T> = outputs.iter().map(|(id, t)| (id.as_str(), t)).collect();
    let src_ids: BTreeSet<&str> = sources.iter().map(|d| d.doc_id.as_str()).collect();
    let mut missing: Vec<String> = sources.iter().filter(|d| !by_id.contains_key(d.doc_id.as_str())).map(|d| d.doc_id.clone()).collect();
    missing.extend(outputs.iter().filter(|(id, _)| !src_ids.contains(id.as_str())).map(|(id, _)| id.clone()));
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(EvalError::MissingIds(missing));
    }
    Ok(sources.iter().map(|d| (d, by_id[d.doc_id.as_str()])).collect())
}

pub fn evaluate(items: &[EvalItem<'_>], ctx: &EvalContext<'_>) -> Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::NoOutputs);
    }
    let outputs: Vec<Vec<TokenId>> = items.iter().map(|i| i.output.to_vec()).collect();
    let sources: Vec<Vec<TokenId>> = items.iter().map(|i| i.source.to_vec()).collect();
    let targets: Vec<StyleId> = items.iter().map(|i| i.target).collect();
    let acc_d = transfer_accuracy(ctx.doc_classifier, &outputs, &targets, false, ctx.terminators)?;
    let acc_s = transfer_accuracy(ctx.sent_classifier, &outputs, &targets, true, ctx.terminators)?;
    let bleu1 = bleu_n(&outputs, &sources, 1)?;
    let bleu2 = bleu_n(&outputs, &sources, 2)?;
    let mut per_doc = Vec::with_capacity(items.len());
    let (mut bsp, mut bsr, mut bsf1) = (0.0, 0.0, 0.0);
    for it in items {
        let (p, r, f) = bertscore_proxy(it.output, it.source, ctx.embeddings);
        bsp += p;
        bsr += r;
        bsf1 += f;
        let predicted = if it.output.is_empty() {
            None
        } else {
            Some(argmax(&ctx.doc_classifier.classify(it.output)?))
        };
        per_doc.push(DocEval {
            id: it.id.to_string(),
            target_style: it.target,
            predicted_style: predicted,
            bleu1: bleu_n(&[it.output.to_vec()], &[it.source.to_vec()], 1)?,
            bsf1: f,
        });
    }
    let k = items.len() as f64;
    let (bsp, bsr, bsf1) = (bsp / k, bsr / k, bsf1 / k);
    // cosine similarity can go negative on unrelated text
    let (g_bl_d, g_bs_d) = overall_metrics(acc_d, bleu1, bleu2, bsf1.max(0.0))?;
    Ok(EvalReport {
        version: REPORT_VERSION,
        acc_d,
        acc_s,
        bleu1,
        bleu2,
        bsp,
        bsr,
        bsf1,
        g_bl_d,
        g_bs_d,
        content_recall: ctx.roles.map(|r| corpus_content_recall(&sources, &outputs, r)),
        per_doc,
        config_fingerprint: ctx.config_fingerprint.clone(),
    })
}

impl EvalReport {
    /// Fixed-column text table, one decimal.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let cols = ["Acc_d", "Acc_s", "BLEU1", "BLEU2", "BSp*", "BSr*", "BSf1*", "G-BL_d", "G-BS_d"];
        let vals = [self.acc_d, self.acc_s, self.bleu1, self.bleu2, self.bsp, self.bsr, self.bsf1, self.g_bl_d, self.g_bs_d];
        let _ = writeln!(s, "{}", cols.iter().map(|c| format!("{c:>7}")).collect::<Vec<_>>().join(" |"));
        let _ = writeln!(s, "{}", vals.iter().map(|v| format!("{v:>7.1}")).collect::<Vec<_>>().join(" |"));
        if let Some(r) = self.content_recall {
            let _ = writeln!(s, "content recall: {r:.3}");
        }
        let _ = writeln!(s, "* BS-proxy: greedy cosine over static token embeddings, not BERTScore");
        s
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(s)?)
    }
}
