//! Configuration, training orchestration, checkpoints, embedding export and
//! the command-line interface.

pub mod attribution;
pub mod cli;
pub mod config;
pub mod gradcheck;
pub mod train;

use thiserror::Error;

use crate::classifiers::ClassifierError;
use crate::corpus::CorpusError;
use crate::evalkit::EvalError;
use crate::generator::GeneratorError;
use crate::objectives::ObjectiveError;
use crate::substrate::SubstrateError;

pub use gradcheck::{check_all, check_full_loss, toy_setup, LossTerm, TermReport, ToyCheck};
pub use attribution::{attribution_trace, beta_by_role, render_attribution, BetaByRole};
pub use config::{Profile, RunConfig, CONFIG_KEYS, DATA_ROOT_ENV};
pub use train::{
    evaluate_split, export_embeddings, load_checkpoint, save_checkpoint, target_for, train, transfer_all, Checkpoint, Corpus, EmbeddingRecord,
    TrainOptions, TrainOutcome, TransferRecord, CHECKPOINT_VERSION,
};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {source}")]
    Diverged { step: usize, source: ObjectiveError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
