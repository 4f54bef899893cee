//! Flat key-value run configuration with two loss-weight profiles.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunnerError;
use crate::classifiers::ClassifierConfig;
use crate::corpus::{TokenizerConfig, TokenizerMode};
use crate::generator::{CorruptionMode, ModelConfig};
use crate::jscw::WeighMode;
use crate::objectives::LossConfig;

/// Environment variable naming the default data root.
pub const DATA_ROOT_ENV: &str = "LONGSTYLE_DATA_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// lambda1 = 0.05, p = 0.3, k = 2.
    #[default]
    Chinese,
    /// lambda1 = 0.001, p = 0.1, k = 1.
    English,
}

/// Every key, its default, and its meaning. Printed by `--help`.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("profile", "chinese", "loss-weight profile: chinese (lambda1 0.05, p 0.3, k 2) or english (lambda1 0.001, p 0.1, k 1)"),
    ("d", "64", "model width"),
    ("heads", "2", "attention heads"),
    ("ffn_hidden", "128", "feed-forward hidden width"),
    ("enc_layers", "2", "encoder layers"),
    ("dec_layers", "2", "autoregressive decoder layers"),
    ("nar_layers", "6", "non-autoregressive decoder layers"),
    ("fusion_layers", "2", "style fusion layers"),
    ("jscw_layers", "3", "joint style/content weigher layers"),
    ("half_window", "2", "half-width h of the style-score convolution window (2h+1)"),
    ("max_len", "128", "longest document in tokens; generation stops at 1.2 x source length up to this"),
    ("weigh_mode", "joint", "joint | style_only (ablation: beta = sigmoid(style score))"),
    ("corruption", "rows", "rows | tokens: where the neighbour swap is applied"),
    ("lambda1", "profile", "weight of the style losses"),
    ("lambda2", "1.0", "weight of the NAR loss"),
    ("lambda3", "1.0", "weight of the entropy hinge"),
    ("tau", "0.5", "contrastive temperature"),
    ("epsilon", "0.15", "entropy threshold of the hinge, nats"),
    ("infonce", "false", "include the positive in the contrastive denominator"),
    ("ablate_sty_s", "false", "drop the sentence-level style loss"),
    ("soft_pseudo", "true", "feed the NAR pseudo-target as distributions (false: argmax tokens)"),
    ("swap_p", "profile", "neighbour-swap probability p"),
    ("swap_k", "profile", "neighbour-swap radius k"),
    ("lr", "5e-5", "Adam learning rate (beta1 0.9, beta2 0.999, eps 1e-8)"),
    ("batch_size", "2", "documents per optimizer step"),
    ("epochs", "30", "training epochs"),
    ("clip_norm", "1.0", "global gradient-norm clip; 0 disables"),
    ("cls_d", "32", "classifier width"),
    ("cls_layers", "1", "classifier encoder layers"),
    ("cls_epochs", "3", "classifier pre-training epochs"),
    ("cls_lr", "1e-3", "classifier learning rate"),
    ("tokenizer", "whitespace", "whitespace | char: how raw text is split into tokens"),
    ("terminators", ".!?", "characters that end a sentence"),
    ("seed", "0", "master seed"),
    ("corpus_dir", "$LONGSTYLE_DATA_ROOT/corpus", "directory with train/val/test.jsonl, vocab.json, styles.json"),
    ("work_dir", "$LONGSTYLE_DATA_ROOT/run", "directory for checkpoints and logs"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub nar_layers: usize,
    pub fusion_layers: usize,
    pub jscw_layers: usize,
    pub half_window: usize,
    pub max_len: usize,
    pub weigh_mode: WeighMode,
    pub corruption: CorruptionMode,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub infonce: bool,
    pub ablate_sty_s: bool,
    pub soft_pseudo: bool,
    pub swap_p: f64,
    pub swap_k: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub cls_d: usize,
    pub cls_layers: usize,
    pub cls_epochs: usize,
    pub cls_lr: f64,
    pub tokenizer: TokenizerMode,
    pub terminators: String,
    pub seed: u64,
    pub corpus_dir: Option<PathBuf>,
    pub work_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_profile(Profile::Chinese)
    }
}

impl RunConfig {
    pub fn with_profile(profile: Profile) -> Self {
        let (lambda1, swap_p, swap_k) = match profile {
            Profile::Chinese => (0.05, 0.3, 2),
            Profile::English => (0.001, 0.1, 1),
        };
        let m = ModelConfig::default();
        Self {
            profile,
            d: m.d,
            heads: m.heads,
            ffn_hidden: m.ffn_hidden,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            nar_layers: m.nar_layers,
            fusion_layers: m.fusion_layers,
            jscw_layers: m.jscw_layers,
            half_window: m.half_window,
            max_len: m.max_len,
            weigh_mode: m.weigh_mode,
            corruption: m.corruption,
            lambda1,
            lambda2: 1.0,
            lambda3: 1.0,
            tau: 0.5,
            epsilon: 0.15,
            infonce: false,
            ablate_sty_s: false,
            soft_pseudo: true,
            swap_p,
            swap_k,
            lr: 5e-5,
            batch_size: 2,
            epochs: 30,
            clip_norm: 1.0,
            cls_d: 32,
            cls_layers: 1,
            cls_epochs: 3,
            cls_lr: 1e-3,
            tokenizer: TokenizerMode::Whitespace,
            terminators: ".!?".into(),
            seed: 0,
            corpus_dir: None,
            work_dir: None,
        }
    }

    /// Parses a flat TOML file. The `profile` key, if present, chooses the
    /// defaults; every other key overrides them.
    pub fn from_toml(text: &str) -> Result<Self, RunnerError> {
        let user: toml::Table = toml::from_str(text).map_err(|e| RunnerError::Config(e.to_string()))?;
        let profile = match user.get("profile") {
            Some(v) => Profile::deserialize(v.clone()).map_err(|e| RunnerError::Config(format!("profile: {e}")))?,
            None => Profile::default(),
        };
        let base = Self::with_profile(profile);
        let mut table = toml::Table::try_from(&base).map_err(|e| RunnerError::Config(e.to_string()))?;
        for (k, v) in user {
            table.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| RunnerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        self.loss_config().validate()?;
        if self.batch_size == 0 {
            return Err(RunnerError::Config("batch_size must be at least 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(RunnerError::Config("lr must be positive".into()));
        }
        if self.terminators.is_empty() {
            return Err(RunnerError::Config("terminators must not be empty".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(RunnerError::Config("clip_norm must be non-negative".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            tau: self.tau,
            epsilon: self.epsilon,
            infonce: self.infonce,
            ablate_sty_s: self.ablate_sty_s,
            soft_pseudo: self.soft_pseudo,
            swap_p: self.swap_p,
            swap_k: self.swap_k,
        }
    }

    pub fn model_config(&self, vocab_size: usize, num_styles: usize, terminators: Vec<u32>) -> ModelConfig {
        ModelConfig {
            vocab_size,
            num_styles,
            d: self.d,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            nar_layers: self.nar_layers,
            fusion_layers: self.fusion_layers,
            jscw_layers: self.jscw_layers,
            half_window: self.half_window,
            max_len: self.max_len,
            weigh_mode: self.weigh_mode,
            corruption: self.corruption,
            terminators,
        }
    }

    pub fn classifier_config(&self, vocab_size: usize, num_styles: usize) -> ClassifierConfig {
        ClassifierConfig {
            vocab_size,
            num_styles,
            d: self.cls_d,
            heads: if self.cls_d.is_multiple_of(2) { 2 } else { 1 },
            ffn_hidden: 2 * self.cls_d,
            layers: self.cls_layers,
            epochs: self.cls_epochs,
            lr: self.cls_lr,
            batch_size: 8,
        }
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        TokenizerConfig { mode: self.tokenizer, terminators: self.terminators.chars().collect(), max_doc_len: self.max_len }
    }

    /// SHA-256 of the serialised configuration, without paths.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.corpus_dir = None;
        c.work_dir = None;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    fn data_root() -> PathBuf {
        std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.corpus_dir.clone().unwrap_or_else(|| Self::data_root().join("corpus"))
    }

    pub fn work_dir(&self) -> PathBuf {
        self.work_dir.clone().unwrap_or_else(|| Self::data_root().join("run"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_profiles() {
        let c = RunConfig::default();
        assert_eq!((c.jscw_layers, c.nar_layers, c.epsilon, c.lr, c.batch_size), (3, 6, 0.15, 5e-5, 2));
        assert_eq!((c.lambda1, c.lambda2, c.lambda3, c.swap_p, c.swap_k), (0.05, 1.0, 1.0, 0.3, 2));
        let e = RunConfig::from_toml("profile = \"english\"").unwrap();
        assert_eq!((e.lambda1, e.swap_p, e.swap_k), (0.001, 0.1, 1));
        let o = RunConfig::from_toml("profile = \"english\"\nswap_k = 3").unwrap();
        assert_eq!(o.swap_k, 3);
    }

    #[test]
    fn validation_rejects_bad_values() {
        for bad in ["lambda1 = -0.1", "swap_p = 1.2", "swap_k = 0", "epsilon = 0.0", "tau = -1.0", "nope = 1"] {
            assert!(RunConfig::from_toml(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn every_field_is_documented() {
        let t = toml::Table::try_from(RunConfig::default()).unwrap();
        for k in t.keys() {
            assert!(CONFIG_KEYS.iter().any(|(n, _, _)| n == k), "undocumented key {k}");
        }
    }
}
