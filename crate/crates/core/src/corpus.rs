//! Corpus ingestion: vocabulary, tokenisation, sentence segmentation with
//! sentence markers, the synthetic styled-corpus generator, and batching.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SEN: TokenId = 4;
pub const NUM_RESERVED: usize = 5;
const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sen>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("invalid document: {0}")]
    InvalidDoc(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Token ↔ id maps. Ids `0..NUM_RESERVED` are the fixed reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self { tokens: Vec::new(), index: HashMap::new() };
        for t in RESERVED {
            v.insert(t);
        }
        v
    }

    /// Rebuilds from an id-ordered token list, which must start with the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() < NUM_RESERVED || tokens[..NUM_RESERVED] != RESERVED {
            return Err(CorpusError::Config("vocabulary does not start with the reserved tokens".into()));
        }
        let mut v = Self { tokens: Vec::new(), index: HashMap::new() };
        for t in tokens {
            if v.index.contains_key(&t) {
                return Err(CorpusError::Config(format!("duplicate vocabulary entry `{t}`")));
            }
            v.insert(&t);
        }
        Ok(v)
    }

    /// Returns the id of `token`, adding it if new.
    pub fn insert(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < NUM_RESERVED
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, serde_json::to_string_pretty(&self.tokens)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let tokens: Vec<String> = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_tokens(tokens)
    }
}

/// Named style labels. Index in this list is the style id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleSet {
    names: Vec<String>,
}

pub type StyleId = usize;

impl StyleSet {
    pub fn new(names: Vec<String>) -> Result<Self, CorpusError> {
        if names.len() < 2 {
            return Err(CorpusError::Config("at least two styles are required".into()));
        }
        let unique: BTreeSet<_> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(CorpusError::Config("duplicate style label".into()));
        }
        Ok(Self { names })
    }

    pub fn id(&self, name: &str) -> Option<StyleId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: StyleId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// A tokenised multi-sentence document with its style label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyledDoc {
    pub doc_id: String,
    /// Token ids without sentence markers.
    pub tokens: Vec<TokenId>,
    /// Strictly increasing positions after which a sentence ends; the last is `tokens.len()`.
    pub sentence_ends: Vec<usize>,
    pub style: StyleId,
}

impl StyledDoc {
    pub fn validate(&self, styles: &StyleSet) -> Result<(), CorpusError> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(CorpusError::InvalidDoc(format!("{}: empty document", self.doc_id)));
        }
        if self.sentence_ends.is_empty() || self.sentence_ends.last() != Some(&n) {
            return Err(CorpusError::InvalidDoc(format!("{}: last sentence must end at {n}", self.doc_id)));
        }
        if self.sentence_ends.windows(2).any(|w| w[0] >= w[1]) || self.sentence_ends[0] == 0 {
            return Err(CorpusError::InvalidDoc(format!("{}: sentence ends not strictly increasing", self.doc_id)));
        }
        if self.style >= styles.len() {
            return Err(CorpusError::InvalidDoc(format!("{}: style id {} out of range", self.doc_id, self.style)));
        }
        Ok(())
    }

    pub fn num_sentences(&self) -> usize {
        self.sentence_ends.len()
    }

    /// Token slices of each sentence.
    pub fn sentences(&self) -> Vec<&[TokenId]> {
        let mut start = 0;
        self.sentence_ends
            .iter()
            .map(|&end| {
                let s = &self.tokens[start..end];
                start = end;
                s
            })
            .collect()
    }

    /// Token sequence with a sentence marker after every sentence (length `n + m`).
    pub fn marked(&self) -> Vec<TokenId> {
        insert_sen_markers(self)
    }
}

/// SHA-256 over document ids, tokens, sentence ends and labels.
pub fn fingerprint(docs: &[StyledDoc]) -> String {
    let mut h = Sha256::new();
    for d in docs {
        h.update(d.doc_id.as_bytes());
        h.update([0u8]);
        for t in &d.tokens {
            h.update(t.to_le_bytes());
        }
        for e in &d.sentence_ends {
            h.update((*e as u64).to_le_bytes());
        }
        h.update((d.style as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Inserts [`SEN`] immediately after the last token of each sentence.
pub fn insert_sen_markers(doc: &StyledDoc) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(doc.tokens.len() + doc.sentence_ends.len());
    let mut start = 0;
    for &end in &doc.sentence_ends {
        out.extend_from_slice(&doc.tokens[start..end]);
        out.push(SEN);
        start = end;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    #[default]
    Whitespace,
    Char,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub mode: TokenizerMode,
    pub terminators: Vec<char>,
    pub max_doc_len: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { mode: TokenizerMode::Whitespace, terminators: vec!['.', '!', '?'], max_doc_len: 128 }
    }
}

impl TokenizerConfig {
    pub fn split<'a>(&self, text: &'a str) -> Vec<&'a str> {
        match self.mode {
            TokenizerMode::Whitespace => text.split_whitespace().collect(),
            TokenizerMode::Char => text
                .char_indices()
                .filter(|(_, c)| !c.is_whitespace())
                .map(|(i, c)| &text[i..i + c.len_utf8()])
                .collect(),
        }
    }

    pub fn is_terminator(&self, token: &str) -> bool {
        !token.is_empty() && token.chars().all(|c| self.terminators.contains(&c))
    }

    /// Tokenises and segments `text`. Sentences end after each terminator
    /// token; trailing tokens form a final sentence.
    pub fn tokenize(&self, text: &str, vocab: &Vocab) -> (Vec<TokenId>, Vec<usize>) {
        let pieces = self.split(text);
        let mut tokens = Vec::with_capacity(pieces.len().min(self.max_doc_len));
        let mut ends = Vec::new();
        for p in pieces.into_iter().take(self.max_doc_len) {
            tokens.push(vocab.id(p));
            if self.is_terminator(p) {
                ends.push(tokens.len());
            }
        }
        if !tokens.is_empty() && ends.last() != Some(&tokens.len()) {
            ends.push(tokens.len());
        }
        (tokens, ends)
    }

    pub fn detokenize(&self, ids: &[TokenId], vocab: &Vocab) -> String {
        let words = ids.iter().filter(|&&t| !Vocab::is_reserved(t)).map(|&t| vocab.token(t));
        match self.mode {
            TokenizerMode::Whitespace => words.collect::<Vec<_>>().join(" "),
            TokenizerMode::Char => words.collect(),
        }
    }

    pub fn build_vocab<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut v = Vocab::new();
        for t in texts {
            for p in self.split(t) {
                v.insert(p);
            }
        }
        v
    }
}

#[derive(Debug, Deserialize)]
struct JsonRecord {
    text: String,
    style: String,
    #[serde(default)]
    id: Option<serde_json::Value>,
}

/// Reads `{"text", "style", "id"?}` records, one per line. Blank lines are skipped.
pub fn load_jsonl(
    path: &Path,
    vocab: &Vocab,
    styles: &StyleSet,
    tok: &TokenizerConfig,
) -> Result<Vec<StyledDoc>, CorpusError> {
    let file = fs::File::open(path)?;
    parse_jsonl(BufReader::new(file), vocab, styles, tok)
}

pub fn parse_jsonl(
    reader: impl BufRead,
    vocab: &Vocab,
    styles: &StyleSet,
    tok: &TokenizerConfig,
) -> Result<Vec<StyledDoc>, CorpusError> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?;
        let style = styles.id(&rec.style).ok_or_else(|| CorpusError::Validation {
            line: line_no,
            message: format!("unknown style label `{}`", rec.style),
        })?;
        let (tokens, sentence_ends) = tok.tokenize(&rec.text, vocab);
        if tokens.is_empty() {
            return Err(CorpusError::Validation { line: line_no, message: "empty text".into() });
        }
        let doc_id = match rec.id {
            Some(serde_json::Value::String(s)) => s,
            Some(v) => v.to_string(),
            None => format!("line-{line_no}"),
        };
        docs.push(StyledDoc { doc_id, tokens, sentence_ends, style });
    }
    Ok(docs)
}

/// Reads only the texts of a JSONL file (for vocabulary building).
pub fn read_jsonl_texts(path: &Path) -> Result<Vec<String>, CorpusError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(rec.text);
    }
    Ok(out)
}

pub fn write_jsonl(
    path: &Path,
    docs: &[StyledDoc],
    vocab: &Vocab,
    styles: &StyleSet,
    tok: &TokenizerConfig,
) -> Result<(), CorpusError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for d in docs {
        let rec = serde_json::json!({
            "id": d.doc_id,
            "text": tok.detokenize(&d.tokens, vocab),
            "style": styles.name(d.style),
        });
        writeln!(f, "{rec}")?;
    }
    f.flush()?;
    Ok(())
}

// ---- synthetic corpus ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Total vocabulary size including reserved tokens and the terminator.
    pub vocab_size: usize,
    pub num_styles: usize,
    pub markers_per_style: usize,
    /// Probability that a token slot holds a style marker.
    pub marker_rate: f64,
    pub sentence_len_min: usize,
    pub sentence_len_max: usize,
    pub sentences_min: usize,
    pub sentences_max: usize,
    pub train_docs: usize,
    pub val_docs: usize,
    pub test_docs: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            num_styles: 2,
            markers_per_style: 12,
            marker_rate: 0.3,
            sentence_len_min: 4,
            sentence_len_max: 8,
            sentences_min: 2,
            sentences_max: 4,
            train_docs: 500,
            val_docs: 50,
            test_docs: 100,
            seed: 17,
        }
    }
}

/// Ground-truth role of a token id in a synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Reserved,
    Terminator,
    Content,
    Marker(StyleId),
}

pub const SYNTH_TERMINATOR: &str = ".";

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub vocab: Vocab,
    pub styles: StyleSet,
    pub train: Vec<StyledDoc>,
    pub val: Vec<StyledDoc>,
    pub test: Vec<StyledDoc>,
    /// Role of every vocabulary id.
    pub roles: Vec<TokenRole>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.num_styles < 2 {
            return Err(CorpusError::Config("num_styles must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.marker_rate) {
            return Err(CorpusError::Config(format!("marker_rate {} outside [0, 1)", self.marker_rate)));
        }
        if self.markers_per_style == 0 {
            return Err(CorpusError::Config("markers_per_style must be positive".into()));
        }
        let needed = NUM_RESERVED + 1 + self.num_styles * self.markers_per_style + 1;
        if self.vocab_size < needed {
            return Err(CorpusError::Config(format!(
                "vocab_size {} too small for {} styles x {} markers (need at least {needed})",
                self.vocab_size, self.num_styles, self.markers_per_style
            )));
        }
        if self.sentence_len_min == 0 || self.sentence_len_min > self.sentence_len_max {
            return Err(CorpusError::Config("invalid sentence length range".into()));
        }
        if self.sentences_min == 0 || self.sentences_min > self.sentences_max {
            return Err(CorpusError::Config("invalid sentences-per-doc range".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, CorpusError> {
        toml::from_str(text).map_err(|e| CorpusError::Config(e.to_string()))
    }
}

/// Generates a styled corpus whose style is carried only by per-style marker
/// tokens. Each document draws its style uniformly; each token slot is a
/// marker of that style with probability `marker_rate`, otherwise a shared
/// content token. When the rate is positive every sentence carries at least
/// one marker.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthCorpus, CorpusError> {
    spec.validate()?;
    let mut vocab = Vocab::new();
    let mut roles = vec![TokenRole::Reserved; NUM_RESERVED];
    let term = vocab.insert(SYNTH_TERMINATOR);
    roles.push(TokenRole::Terminator);
    let mut markers: Vec<Vec<TokenId>> = Vec::with_capacity(spec.num_styles);
    for s in 0..spec.num_styles {
        let ids = (0..spec.markers_per_style)
            .map(|j| {
                roles.push(TokenRole::Marker(s));
                vocab.insert(&format!("m{s}_{j}"))
            })
            .collect();
        markers.push(ids);
    }
    let mut content = Vec::new();
    let mut j = 0;
    while vocab.len() < spec.vocab_size {
        content.push(vocab.insert(&format!("w{j}")));
        roles.push(TokenRole::Content);
        j += 1;
    }
    let styles = StyleSet::new((0..spec.num_styles).map(|s| format!("S{s}")).collect())?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let make_split = |prefix: &str, count: usize, rng: &mut ChaCha8Rng| -> Vec<StyledDoc> {
        (0..count)
            .map(|i| {
                let style = rng.gen_range(0..spec.num_styles);
                let n_sent = rng.gen_range(spec.sentences_min..=spec.sentences_max);
                let mut tokens = Vec::new();
                let mut ends = Vec::new();
                for _ in 0..n_sent {
                    let len = rng.gen_range(spec.sentence_len_min..=spec.sentence_len_max);
                    let start = tokens.len();
                    let mut any_marker = false;
                    for _ in 0..len {
                        if rng.gen_bool(spec.marker_rate) {
                            tokens.push(*markers[style].choose(rng).expect("markers_per_style > 0"));
                            any_marker = true;
                        } else {
                            tokens.push(*content.choose(rng).expect("content set is non-empty"));
                        }
                    }
                    if spec.marker_rate > 0.0 && !any_marker {
                        let slot = start + rng.gen_range(0..len);
                        tokens[slot] = *markers[style].choose(rng).expect("markers_per_style > 0");
                    }
                    tokens.push(term);
                    ends.push(tokens.len());
                }
                StyledDoc { doc_id: format!("{prefix}-{i:05}"), tokens, sentence_ends: ends, style }
            })
            .collect()
    };
    let train = make_split("train", spec.train_docs, &mut rng);
    let val = make_split("val", spec.val_docs, &mut rng);
    let test = make_split("test", spec.test_docs, &mut rng);
    Ok(SynthCorpus { vocab, styles, train, val, test, roles })
}

impl SynthCorpus {
    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig { terminators: vec!['.'], ..TokenizerConfig::default() }
    }

    /// Writes `train/val/test.jsonl`, `vocab.json`, `styles.json` and `roles.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        let tok = self.tokenizer();
        write_jsonl(&dir.join("train.jsonl"), &self.train, &self.vocab, &self.styles, &tok)?;
        write_jsonl(&dir.join("val.jsonl"), &self.val, &self.vocab, &self.styles, &tok)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test, &self.vocab, &self.styles, &tok)?;
        self.vocab.save(&dir.join("vocab.json"))?;
        fs::write(dir.join("styles.json"), serde_json::to_string_pretty(&self.styles)?)?;
        fs::write(dir.join("roles.json"), serde_json::to_string_pretty(&self.roles)?)?;
        Ok(())
    }
}

pub fn load_roles(path: &Path) -> Result<Vec<TokenRole>, CorpusError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn load_styles(path: &Path) -> Result<StyleSet, CorpusError> {
    let s: StyleSet = serde_json::from_str(&fs::read_to_string(path)?)?;
    StyleSet::new(s.names)
}

/// Fraction of non-terminator tokens that are style markers.
pub fn marker_fraction(docs: &[StyledDoc], roles: &[TokenRole]) -> f64 {
    let (mut markers, mut total) = (0usize, 0usize);
    for d in docs {
        for &t in &d.tokens {
            match roles[t as usize] {
                TokenRole::Marker(_) => {
                    markers += 1;
                    total += 1;
                }
                TokenRole::Content => total += 1,
                _ => {}
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        markers as f64 / total as f64
    }
}

// ---- batching ----

/// Marked, padded sequences for a group of documents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Indices into the document list the batch was built from.
    pub doc_indices: Vec<usize>,
    /// `batch × width` ids, padded with the pad id.
    pub ids: Vec<Vec<TokenId>>,
    /// `true` at real positions.
    pub mask: Vec<Vec<bool>>,
    pub width: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.doc_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_indices.is_empty()
    }

    /// Real (unpadded) length of row `i`.
    pub fn length(&self, i: usize) -> usize {
        self.mask[i].iter().filter(|&&m| m).count()
    }
}

/// Groups documents in order into batches of `batch_size` (the last may be
/// smaller). Sequences carry sentence markers and are padded to the batch width.
pub fn make_batches(docs: &[StyledDoc], batch_size: usize, pad_id: TokenId) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let indices: Vec<usize> = (0..docs.len()).collect();
    indices
        .chunks(batch_size)
        .map(|chunk| {
            let marked: Vec<Vec<TokenId>> = chunk.iter().map(|&i| docs[i].marked()).collect();
            let width = marked.iter().map(Vec::len).max().unwrap_or(0);
            let mut ids = Vec::with_capacity(chunk.len());
            let mut mask = Vec::with_capacity(chunk.len());
            for m in marked {
                let len = m.len();
                let mut row = m;
                row.resize(width, pad_id);
                ids.push(row);
                mask.push((0..width).map(|j| j < len).collect());
            }
            Batch { doc_indices: chunk.to_vec(), ids, mask, width }
        })
        .collect()
}

/// Shuffles document order for one epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}
