//! Per-token attribution reports of the content weigher.
//!
//! One block per document. Each row lists, in order: word position, sentence
//! index, token, then `alpha_l beta_l` for every layer `l = 1..L`, then the
//! final-layer `mu` row over sentences (absent in style-only mode). Columns are
//! tab-separated with a header line.

use std::fmt::Write as _;

use super::RunnerError;
use crate::corpus::{StyledDoc, TokenRole, Vocab};
use crate::generator::Model;
use crate::jscw::JscwTrace;
use crate::substrate::Graph;

/// Runs the encoder and weigher on `doc` and returns the per-layer trace.
pub fn attribution_trace(model: &Model, doc: &StyledDoc) -> Result<JscwTrace, RunnerError> {
    let mut g = Graph::inference();
    let parts = model.content_of(&mut g, doc)?;
    Ok(parts.jscw.trace(&g))
}

pub fn render_attribution(doc: &StyledDoc, trace: &JscwTrace, vocab: &Vocab) -> String {
    let mut out = String::new();
    let layers = trace.len();
    let _ = writeln!(out, "# doc {} style {} tokens {} sentences {}", doc.doc_id, doc.style, doc.tokens.len(), doc.sentence_ends.len());
    let mut header = String::from("pos\tsent\ttoken");
    for l in 1..=layers {
        let _ = write!(header, "\talpha_{l}\tbeta_{l}");
    }
    let last_mu = trace.last().and_then(|t| t.mu.as_ref());
    if let Some(mu) = last_mu {
        for j in 0..mu.cols() {
            let _ = write!(header, "\tmu_{j}");
        }
    }
    let _ = writeln!(out, "{header}");
    let mut sent = 0;
    for (i, &tok) in doc.tokens.iter().enumerate() {
        while sent + 1 < doc.sentence_ends.len() && i >= doc.sentence_ends[sent] {
            sent += 1;
        }
        let _ = write!(out, "{i}\t{sent}\t{}", vocab.token(tok));
        for t in trace {
            let _ = write!(out, "\t{:.4}\t{:.4}", t.weights.alpha[i], t.weights.beta[i]);
        }
        if let Some(mu) = last_mu {
            for v in mu.row(i) {
                let _ = write!(out, "\t{v:.4}");
            }
        }
        out.push('\n');
    }
    out
}

/// Mean final-layer beta over ground-truth content tokens and over marker tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BetaByRole {
    pub content: f64,
    pub marker: f64,
}

impl BetaByRole {
    pub fn gap(&self) -> f64 {
        self.content - self.marker
    }
}

pub fn beta_by_role(model: &Model, docs: &[StyledDoc], roles: &[TokenRole]) -> Result<BetaByRole, RunnerError> {
    let (mut c, mut nc, mut m, mut nm) = (0.0, 0usize, 0.0, 0usize);
    for d in docs {
        let trace = attribution_trace(model, d)?;
        let beta = &trace.last().expect("at least one layer").weights.beta;
        for (&tok, &b) in d.tokens.iter().zip(beta) {
            match roles.get(tok as usize) {
                Some(TokenRole::Content) => {
                    c += b;
                    nc += 1;
                }
                Some(TokenRole::Marker(_)) => {
                    m += b;
                    nm += 1;
                }
                _ => {}
            }
        }
    }
    Ok(BetaByRole { content: c / nc.max(1) as f64, marker: m / nm.max(1) as f64 })
}
