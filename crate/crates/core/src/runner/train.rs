//! The training loop, checkpoint files, batch transfer and embedding export.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RunConfig, RunnerError};
use crate::classifiers::StyleClassifier;
use crate::corpus::{
    epoch_order, load_jsonl, load_roles, load_styles, StyleId, StyleSet, StyledDoc, SynthCorpus, TokenId, TokenRole, TokenizerConfig,
    Vocab,
};
use crate::evalkit::{evaluate, EvalContext, EvalItem, EvalReport};
use crate::generator::{Model, ModelConfig, SwapPlan};
use crate::objectives::{compute_losses, LossLog, LossValues, PositivePool, StepInputs};
use crate::substrate::{load_arrays, store_to_arrays, Adam, Graph, NamedArray};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A loaded corpus with its vocabulary and style set.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub styles: StyleSet,
    pub tokenizer: TokenizerConfig,
    pub train: Vec<StyledDoc>,
    pub val: Vec<StyledDoc>,
    pub test: Vec<StyledDoc>,
    /// Ground-truth token roles, for synthetic corpora.
    pub roles: Option<Vec<TokenRole>>,
}

impl Corpus {
    pub fn from_synth(s: SynthCorpus) -> Self {
        let tokenizer = s.tokenizer();
        Self { vocab: s.vocab, styles: s.styles, tokenizer, train: s.train, val: s.val, test: s.test, roles: Some(s.roles) }
    }

    /// Reads `vocab.json`, `styles.json`, `train/val/test.jsonl` and, if present, `roles.json`.
    pub fn load_dir(dir: &Path, tokenizer: TokenizerConfig) -> Result<Self, RunnerError> {
        let vocab = Vocab::load(&dir.join("vocab.json"))?;
        let styles = load_styles(&dir.join("styles.json"))?;
        let split = |name: &str| -> Result<Vec<StyledDoc>, RunnerError> {
            let p = dir.join(name);
            if p.exists() {
                Ok(load_jsonl(&p, &vocab, &styles, &tokenizer)?)
            } else {
                Ok(Vec::new())
            }
        };
        let (train, val, test) = (split("train.jsonl")?, split("val.jsonl")?, split("test.jsonl")?);
        let roles_path = dir.join("roles.json");
        let roles = if roles_path.exists() { Some(load_roles(&roles_path)?) } else { None };
        Ok(Self { vocab, styles, tokenizer, train, val, test, roles })
    }

    pub fn terminator_ids(&self) -> Vec<TokenId> {
        self.tokenizer
            .terminators
            .iter()
            .filter_map(|c| self.vocab.get(&c.to_string()))
            .collect()
    }
}

/// Deterministic target style for inference: the next style in order.
pub fn target_for(source: StyleId, num_styles: usize) -> StyleId {
    (source + 1) % num_styles
}

fn sample_target<R: Rng>(source: StyleId, num_styles: usize, rng: &mut R) -> StyleId {
    (source + 1 + rng.gen_range(0..num_styles - 1)) % num_styles
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Append per-step loss rows here.
    pub loss_log: Option<&'a Path>,
    /// Write the best checkpoint here after every improving epoch.
    pub checkpoint: Option<&'a Path>,
    /// Run validation transfer every epoch and keep the best epoch by G-BL_d.
    pub validate: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean loss values of every optimizer step.
    pub history: Vec<LossValues>,
    /// Mean total loss per epoch.
    pub epoch_means: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<EvalReport>,
}

/// Trains a model against frozen classifiers.
pub fn train(
    cfg: &RunConfig,
    corpus: &Corpus,
    c_doc: &StyleClassifier,
    c_sent: &StyleClassifier,
    opts: &TrainOptions<'_>,
) -> Result<TrainOutcome, RunnerError> {
    cfg.validate()?;
    if !c_doc.is_frozen() || !c_sent.is_frozen() {
        return Err(RunnerError::Config("classifiers must be frozen before training".into()));
    }
    if corpus.train.is_empty() {
        return Err(RunnerError::Config("training split is empty".into()));
    }
    let loss_cfg = cfg.loss_config();
    let num_styles = corpus.styles.len();
    let mcfg = cfg.model_config(corpus.vocab.len(), num_styles, corpus.terminator_ids());
    let mut model = Model::new(mcfg, cfg.seed)?;
    let mut opt = Adam::new(cfg.lr).with_clip(if cfg.clip_norm > 0.0 { Some(cfg.clip_norm) } else { None });
    let mut pool = PositivePool::new(&corpus.train, num_styles, cfg.seed ^ 0x0b5e);
    let mut log = match opts.loss_log {
        Some(p) => Some(LossLog::open(p)?),
        None => None,
    };
    let mut history = Vec::new();
    let mut epoch_means = Vec::new();
    let mut best: Option<(f64, usize, Vec<NamedArray>, EvalReport)> = None;
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        pool.reshuffle(epoch);
        let order = epoch_order(corpus.train.len(), cfg.seed, epoch);
        let mut epoch_total = 0.0;
        let mut epoch_docs = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((step as u64 + 1).wrapping_mul(0xa076_1d64_78bd_642f)));
            let mut mean = LossValues::default();
            let w = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let doc = &corpus.train[i];
                let target = sample_target(doc.style, num_styles, &mut rng);
                let positive = pool.next(target).map(<[TokenId]>::to_vec).unwrap_or_else(|| doc.tokens.clone());
                let n = doc.tokens.len();
                let inputs = StepInputs {
                    doc,
                    target,
                    positive: &positive,
                    plan_rec: SwapPlan::sample(n, loss_cfg.swap_p, loss_cfg.swap_k, &mut rng),
                    plan_transfer: SwapPlan::sample(n, loss_cfg.swap_p, loss_cfg.swap_k, &mut rng),
                };
                let mut g = Graph::new();
                let (bundle, _) = compute_losses(&mut g, &model, c_doc, c_sent, &inputs, &loss_cfg)?;
                if let Err(e) = bundle.check_finite(&g) {
                    return Err(RunnerError::Diverged { step, source: e });
                }
                let v = bundle.values(&g);
                mean.add_scaled(&v, w);
                model.store.accumulate(&g.backward(bundle.total));
            }
            model.store.scale_grads(w);
            opt.step(&mut model.store);
            epoch_total += mean.total * chunk.len() as f64;
            epoch_docs += chunk.len();
            if let Some(l) = log.as_mut() {
                l.append(step, &mean)?;
            }
            history.push(mean);
            step += 1;
            if opts.max_steps.is_some_and(|m| step >= m) {
                epoch_means.push(epoch_total / epoch_docs as f64);
                break 'epochs;
            }
        }
        let m = epoch_total / epoch_docs.max(1) as f64;
        epoch_means.push(m);
        log::info!("epoch {} mean total loss {m:.4}", epoch + 1);
        if opts.validate && !corpus.val.is_empty() {
            let report = evaluate_split(&model, &corpus.val, corpus, c_doc, c_sent, cfg)?;
            log::info!("epoch {} validation G-BL_d {:.2} acc_d {:.1}", epoch + 1, report.g_bl_d, report.acc_d);
            if best.as_ref().is_none_or(|b| report.g_bl_d > b.0) {
                if let Some(p) = opts.checkpoint {
                    save_checkpoint(p, &model, cfg, Some(epoch))?;
                }
                best = Some((report.g_bl_d, epoch, store_to_arrays(&model.store), report));
            }
        }
    }
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    let (best_epoch, best_val) = match best {
        Some((_, e, params, report)) => {
            load_arrays(&mut model.store, &params)?;
            (Some(e), Some(report))
        }
        None => {
            if let Some(p) = opts.checkpoint {
                save_checkpoint(p, &model, cfg, None)?;
            }
            (None, None)
        }
    };
    Ok(TrainOutcome { model, history, epoch_means, best_epoch, best_val })
}

/// Transfers every document to its deterministic target style.
pub fn transfer_all(model: &Model, docs: &[StyledDoc]) -> Result<Vec<(StyleId, Vec<TokenId>)>, RunnerError> {
    docs.iter()
        .map(|d| {
            let t = target_for(d.style, model.config.num_styles);
            Ok((t, model.transfer(d, t)?))
        })
        .collect()
}

/// Transfers and evaluates a split.
pub fn evaluate_split(
    model: &Model,
    docs: &[StyledDoc],
    corpus: &Corpus,
    c_doc: &StyleClassifier,
    c_sent: &StyleClassifier,
    cfg: &RunConfig,
) -> Result<EvalReport, RunnerError> {
    let outs = transfer_all(model, docs)?;
    let items: Vec<EvalItem<'_>> = docs
        .iter()
        .zip(&outs)
        .map(|(d, (t, o))| EvalItem { id: &d.doc_id, source: &d.tokens, output: o, target: *t })
        .collect();
    let terms = corpus.terminator_ids();
    let ctx = EvalContext {
        doc_classifier: c_doc,
        sent_classifier: c_sent,
        embeddings: model.store.value(model.embed),
        terminators: &terms,
        roles: corpus.roles.as_deref(),
        config_fingerprint: cfg.fingerprint(),
    };
    Ok(evaluate(&items, &ctx)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub run_config: RunConfig,
    pub model_config: ModelConfig,
    pub epoch: Option<usize>,
    pub params: Vec<NamedArray>,
}

pub fn save_checkpoint(path: &Path, model: &Model, cfg: &RunConfig, epoch: Option<usize>) -> Result<(), RunnerError> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        run_config: cfg.clone(),
        model_config: model.config.clone(),
        epoch,
        params: store_to_arrays(&model.store),
    };
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_string(&ck)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, RunConfig), RunnerError> {
    let text = fs::read_to_string(path).map_err(|e| RunnerError::Checkpoint(format!("{}: {e}", path.display())))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| RunnerError::Checkpoint(e.to_string()))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(RunnerError::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
    }
    let mut model = Model::new(ck.model_config, 0)?;
    load_arrays(&mut model.store, &ck.params).map_err(|e| RunnerError::Checkpoint(e.to_string()))?;
    Ok((model, ck.run_config))
}

/// Transfer CLI output record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub id: String,
    pub source_style: String,
    pub target_style: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub doc_id: String,
    /// `original`, `content` or `fused`.
    pub space: String,
    pub vector: Vec<f64>,
}

/// Mean-pooled original, content and fused vectors of every document.
pub fn export_embeddings(model: &Model, docs: &[StyledDoc], target: Option<StyleId>) -> Result<Vec<EmbeddingRecord>, RunnerError> {
    let mut out = Vec::with_capacity(3 * docs.len());
    for d in docs {
        let t = target.unwrap_or_else(|| target_for(d.style, model.config.num_styles));
        let [o, c, f] = model.latent_means(d, t)?;
        for (space, vector) in [("original", o), ("content", c), ("fused", f)] {
            out.push(EmbeddingRecord { doc_id: d.doc_id.clone(), space: space.into(), vector });
        }
    }
    Ok(out)
}

pub fn write_jsonl_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), RunnerError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}
