//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::SubstrateError;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation step.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many entries per parameter (sampled); `None` checks all.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, tolerance: 1e-3, max_entries_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Entry index of the worst error, with (analytic, numeric) at that entry.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `loss` with respect to every parameter in
/// `store` against central differences. `loss` must build a fresh graph from
/// the store and be deterministic.
pub fn grad_check<F>(store: &mut ParamStore, mut loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport, SubstrateError>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var), SubstrateError>,
{
    let (graph, out) = loss(store)?;
    graph.ensure_finite()?;
    let grads = graph.backward(out);
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value().len()]).collect();
    for (id, g) in grads.param_grads() {
        if id.store == store.tag() {
            for (a, v) in analytic[id.index].iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    drop(graph);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<_> = store.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    let mut eval = |store: &ParamStore| -> Result<f64, SubstrateError> {
        let (g, v) = loss(store)?;
        g.ensure_finite()?;
        Ok(g.scalar(v))
    };
    for (pi, id) in ids.into_iter().enumerate() {
        let len = store.value(id).len();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        let mut check = ParamCheck {
            name: store.param(id).name.clone(),
            checked: entries.len(),
            max_rel_error: 0.0,
            worst: None,
        };
        for e in entries {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + opts.step;
            let plus = eval(store);
            store.value_mut(id).data_mut()[e] = orig - opts.step;
            let minus = eval(store);
            store.value_mut(id).data_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let a = analytic[pi][e];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = err.max(check.max_rel_error);
                check.worst = Some((e, a, numeric));
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report, tolerance: opts.tolerance })
}
