//! Command-line interface.
//!
//! Exit status: 0 on success, 1 on any runtime error (or a failed gradient
//! check), 2 on a usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::attribution::{attribution_trace, render_attribution};
use super::gradcheck::{check_all, LossTerm, ToyCheck};
use super::train::{export_embeddings, load_checkpoint, save_checkpoint, train, write_jsonl_records, Corpus};
use super::{target_for, RunConfig, RunnerError, TrainOptions, TransferRecord, CONFIG_KEYS, DATA_ROOT_ENV};
use crate::classifiers::{pretrain_classifier, Granularity, StyleClassifier};
use crate::corpus::{generate_synthetic, load_jsonl, StyledDoc, SynthSpec};
use crate::evalkit::{align, evaluate, EvalContext, EvalItem};

const DOC_CLASSIFIER: &str = "classifier_doc.json";
const SENT_CLASSIFIER: &str = "classifier_sent.json";
const CHECKPOINT: &str = "model.json";
const LOSS_LOG: &str = "losses.csv";

fn keys_help() -> String {
    let mut s = String::from("Run configuration keys (flat TOML, `key = value`):\n");
    let w = CONFIG_KEYS.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
    for (k, d, m) in CONFIG_KEYS {
        s.push_str(&format!("  {k:<w$}  [default: {d}]  {m}\n"));
    }
    s.push_str(&format!(
        "\nsynth-corpus reads a corpus spec instead (vocab_size, num_styles, markers_per_style, marker_rate,\n\
         sentence_len_min/max, sentences_min/max, train_docs, val_docs, test_docs, seed).\n\
         grad-check reads a toy spec instead (d, layers, docs, max_tokens, sentences, vocab_size, epsilon,\n\
         terminator_bias, entries_per_param, step, tolerance).\n\
         \nEnvironment: {DATA_ROOT_ENV} sets the default root for corpus_dir and work_dir.\n"
    ));
    s
}

#[derive(Debug, Parser)]
#[command(name = "longstyle", version, about = "Long-document text style transfer", after_long_help = keys_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Configuration file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-style corpus.
    SynthCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train and freeze the document and sentence classifiers.
    PretrainClassifiers {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output directory (default: work_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the transfer model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Directory holding the classifiers (default: work_dir).
        #[arg(long)]
        classifiers: Option<PathBuf>,
        /// Output directory for the checkpoint and loss log (default: work_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Skip per-epoch validation.
        #[arg(long)]
        no_validate: bool,
    },
    /// Transfer JSONL documents to a target style.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Target style name (default: the next style after the source).
        #[arg(long)]
        target: Option<String>,
    },
    /// Score transfer outputs against their sources.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        classifiers: Option<PathBuf>,
        /// Transfer output JSONL.
        #[arg(long)]
        outputs: PathBuf,
        /// Source JSONL.
        #[arg(long)]
        sources: PathBuf,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Export original, content and fused mean vectors.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        target: Option<String>,
    },
    /// Finite-difference check of the full loss on a toy model.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Check each loss component separately as well as the total.
        #[arg(long)]
        per_term: bool,
    },
    /// Write a per-token alpha/beta/mu report.
    Attribution {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run_config(common: &Common) -> Result<RunConfig, RunnerError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_corpus(cfg: &RunConfig, dir: Option<&Path>) -> Result<Corpus, RunnerError> {
    let dir = dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.corpus_dir());
    Corpus::load_dir(&dir, cfg.tokenizer_config())
}

fn load_classifiers(dir: &Path) -> Result<(StyleClassifier, StyleClassifier), RunnerError> {
    Ok((StyleClassifier::load(&dir.join(DOC_CLASSIFIER))?, StyleClassifier::load(&dir.join(SENT_CLASSIFIER))?))
}

fn style_arg(corpus: &Corpus, name: Option<&str>) -> Result<Option<usize>, RunnerError> {
    name.map(|n| corpus.styles.id(n).ok_or_else(|| RunnerError::Config(format!("unknown style `{n}`"))))
        .transpose()
}

fn read_docs(path: &Path, corpus: &Corpus) -> Result<Vec<StyledDoc>, RunnerError> {
    Ok(load_jsonl(path, &corpus.vocab, &corpus.styles, &corpus.tokenizer)?)
}

fn execute(cmd: Command) -> Result<i32, RunnerError> {
    match cmd {
        Command::SynthCorpus { common, out } => {
            let mut spec = match &common.config {
                Some(p) => SynthSpec::from_toml(&fs::read_to_string(p)?)?,
                None => SynthSpec::default(),
            };
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            let c = generate_synthetic(&spec)?;
            c.write_dir(&out)?;
            println!("wrote {} / {} / {} documents to {}", c.train.len(), c.val.len(), c.test.len(), out.display());
        }
        Command::PretrainClassifiers { common, corpus, out } => {
            let cfg = run_config(&common)?;
            let corpus = load_corpus(&cfg, corpus.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.work_dir());
            fs::create_dir_all(&out)?;
            let cc = cfg.classifier_config(corpus.vocab.len(), corpus.styles.len());
            for (gran, file, salt) in [(Granularity::Document, DOC_CLASSIFIER, 1), (Granularity::Sentence, SENT_CLASSIFIER, 2)] {
                let c = pretrain_classifier(cc.clone(), gran, &corpus.train, &corpus.val, cfg.seed.wrapping_add(salt))?;
                c.save(&out.join(file))?;
                println!("{file}: validation accuracy {:.4}", c.val_accuracy);
            }
        }
        Command::Train { common, corpus, classifiers, out, max_steps, no_validate } => {
            let cfg = run_config(&common)?;
            let corpus = load_corpus(&cfg, corpus.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.work_dir());
            fs::create_dir_all(&out)?;
            let (cd, cs) = load_classifiers(&classifiers.unwrap_or_else(|| cfg.work_dir()))?;
            let ckpt = out.join(CHECKPOINT);
            let log = out.join(LOSS_LOG);
            let opts = TrainOptions { loss_log: Some(&log), checkpoint: Some(&ckpt), validate: !no_validate, max_steps };
            let res = train(&cfg, &corpus, &cd, &cs, &opts)?;
            if res.best_epoch.is_none() {
                save_checkpoint(&ckpt, &res.model, &cfg, None)?;
            }
            println!("trained {} steps; checkpoint {}", res.history.len(), ckpt.display());
            if let Some(r) = &res.best_val {
                print!("{}", r.render_table());
            }
        }
        Command::Transfer { common, checkpoint, corpus, input, output, target } => {
            let cfg = run_config(&common)?;
            let corpus = load_corpus(&cfg, corpus.as_deref())?;
            let (model, _) = load_checkpoint(&checkpoint.unwrap_or_else(|| cfg.work_dir().join(CHECKPOINT)))?;
            let target = style_arg(&corpus, target.as_deref())?;
            let docs = read_docs(&input, &corpus)?;
            let mut recs = Vec::with_capacity(docs.len());
            for d in &docs {
                let t = target.unwrap_or_else(|| target_for(d.style, corpus.styles.len()));
                let out = model.transfer(d, t)?;
                recs.push(TransferRecord {
                    id: d.doc_id.clone(),
                    source_style: corpus.styles.name(d.style).into(),
                    target_style: corpus.styles.name(t).into(),
                    output: corpus.tokenizer.detokenize(&out, &corpus.vocab),
                });
            }
            write_jsonl_records(&output, &recs)?;
            println!("wrote {} transfers to {}", recs.len(), output.display());
        }
        Command::Evaluate { common, checkpoint, corpus, classifiers, outputs, sources, report } => {
            let cfg = run_config(&common)?;
            let corpus = load_corpus(&cfg, corpus.as_deref())?;
            let (model, _) = load_checkpoint(&checkpoint.unwrap_or_else(|| cfg.work_dir().join(CHECKPOINT)))?;
            let (cd, cs) = load_classifiers(&classifiers.unwrap_or_else(|| cfg.work_dir()))?;
            let src = read_docs(&sources, &corpus)?;
            let recs = read_records(&outputs)?;
            let mut outs = Vec::with_capacity(recs.len());
            for r in recs {
                let t = corpus
                    .styles
                    .id(&r.target_style)
                    .ok_or_else(|| RunnerError::Config(format!("unknown style `{}`", r.target_style)))?;
                let (tokens, _) = corpus.tokenizer.tokenize(&r.output, &corpus.vocab);
                outs.push((r.id, (t, tokens)));
            }
            let pairs = match align(&outs, &src) {
                Ok(p) => p,
                Err(crate::evalkit::EvalError::MissingIds(ids)) => {
                    eprintln!("error: ids without a match: {}", ids.join(", "));
                    return Ok(1);
                }
                Err(e) => return Err(e.into()),
            };
            let items: Vec<EvalItem<'_>> = pairs
                .iter()
                .map(|(d, (t, o))| EvalItem { id: &d.doc_id, source: &d.tokens, output: o, target: *t })
                .collect();
            let terms = corpus.terminator_ids();
            let ctx = EvalContext {
                doc_classifier: &cd,
                sent_classifier: &cs,
                embeddings: model.store.value(model.embed),
                terminators: &terms,
                roles: corpus.roles.as_deref(),
                config_fingerprint: cfg.fingerprint(),
            };
            let rep = evaluate(&items, &ctx)?;
            print!("{}", rep.render_table());
            if let Some(p) = report {
                fs::write(p, rep.to_json()?)?;
            }
        }
        Command::ExportEmbeddings { common, checkpoint, corpus, input, output, target } => {
            let cfg = run_config(&common)?;
            let corpus = load_corpus(&cfg, corpus.as_deref())?;
            let (model, _) = load_checkpoint(&checkpoint.unwrap_or_else(|| cfg.work_dir().join(CHECKPOINT)))?;
            let target = style_arg(&corpus, target.as_deref())?;
            let docs = read_docs(&input, &corpus)?;
            let recs = export_embeddings(&model, &docs, target)?;
            write_jsonl_records(&output, &recs)?;
            println!("wrote {} vectors to {}", recs.len(), output.display());
        }
        Command::GradCheck { common, seeds, per_term } => {
            let toy: ToyCheck = match &common.config {
                Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| RunnerError::Config(e.to_string()))?,
                None => ToyCheck::default(),
            };
            let first = common.seed.unwrap_or(0);
            let seeds: Vec<u64> = (first..first + seeds.max(1)).collect();
            let terms: &[LossTerm] = if per_term { &LossTerm::ALL } else { &[LossTerm::Total] };
            let mut worst: f64 = 0.0;
            for (seed, r) in check_all(&toy, &seeds, terms)? {
                let e = r.report.max_rel_error();
                worst = worst.max(e);
                let at = r.report.worst().map(|p| p.name.as_str()).unwrap_or("-");
                println!("seed {seed} {:<9} max rel error {e:.3e} ({at})", r.term.name());
            }
            let ok = worst <= toy.tolerance;
            println!("{} max rel error {worst:.3e} tolerance {:.1e}", if ok { "PASS" } else { "FAIL" }, toy.tolerance);
            return Ok(if ok { 0 } else { 1 });
        }
        Command::Attribution { common, checkpoint, corpus, input, output } => {
            let cfg = run_config(&common)?;
            let corpus = load_corpus(&cfg, corpus.as_deref())?;
            let (model, _) = load_checkpoint(&checkpoint.unwrap_or_else(|| cfg.work_dir().join(CHECKPOINT)))?;
            let docs = read_docs(&input, &corpus)?;
            let mut text = String::new();
            for d in &docs {
                text.push_str(&render_attribution(d, &attribution_trace(&model, d)?, &corpus.vocab));
                text.push('\n');
            }
            fs::write(&output, text)?;
        }
    }
    Ok(0)
}

fn read_records(path: &Path) -> Result<Vec<TransferRecord>, RunnerError> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
