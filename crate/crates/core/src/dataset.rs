//! Activation dumps, label files, and their alignment into sample matrices.
//!
//! An activation dump is a JSON-lines file with one sentence per line plus a
//! sidecar manifest describing the layer layout. Neuron `n` of a dump lives at
//! layer `n / hidden_size`, unit `n % hidden_size`; layer 0 is the embedding
//! layer.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LcaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Last,
    First,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationManifest {
    /// Includes the embedding layer as layer 0.
    pub num_layers: usize,
    pub hidden_size: usize,
    pub model_name: String,
    pub aggregation: Aggregation,
    pub dtype: Dtype,
}

impl ActivationManifest {
    pub fn new(num_layers: usize, hidden_size: usize, model_name: impl Into<String>) -> Self {
        ActivationManifest {
            num_layers,
            hidden_size,
            model_name: model_name.into(),
            aggregation: Aggregation::Last,
            dtype: Dtype::F32,
        }
    }

    /// Total neuron count D.
    pub fn dim(&self) -> usize {
        self.num_layers * self.hidden_size
    }

    /// `(layer, unit)` of a neuron index below D.
    pub fn locate(&self, neuron: usize) -> Result<(usize, usize)> {
        if neuron >= self.dim() {
            return Err(LcaError::IndexOutOfRange {
                index: neuron,
                limit: self.dim(),
            });
        }
        Ok((neuron / self.hidden_size, neuron % self.hidden_size))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_size == 0 {
            return Err(LcaError::InvalidManifest(format!(
                "num_layers={} hidden_size={} gives D=0",
                self.num_layers, self.hidden_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSentence {
    pub sentence_id: i64,
    pub tokens: Vec<String>,
    /// tokens x D
    pub activations: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    pub manifest: ActivationManifest,
    pub sentences: Vec<ActivationSentence>,
}

impl ActivationDataset {
    pub fn dim(&self) -> usize {
        self.manifest.dim()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }
}

#[derive(Deserialize, Serialize)]
struct ActivationRecord {
    sentence_id: i64,
    tokens: Vec<String>,
    activations: Vec<Vec<f64>>,
}

pub fn load_manifest(path: &Path) -> Result<ActivationManifest> {
    let file = File::open(path).map_err(|e| LcaError::io(path, e))?;
    let manifest: ActivationManifest = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| LcaError::InvalidManifest(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &ActivationManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, text + "\n").map_err(|e| LcaError::io(path, e))
}

pub fn load_activations(path: &Path, manifest_path: &Path) -> Result<ActivationDataset> {
    let manifest = load_manifest(manifest_path)?;
    load_activations_with(path, manifest)
}

/// Reads an activation file against an already-parsed manifest.
pub fn load_activations_with(path: &Path, manifest: ActivationManifest) -> Result<ActivationDataset> {
    manifest.validate()?;
    let dim = manifest.dim();
    let file = File::open(path).map_err(|e| LcaError::io(path, e))?;
    let mut sentences = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| LcaError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| LcaError::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let record: ActivationRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if record.tokens.is_empty() {
            return Err(malformed("sentence has no tokens".into()));
        }
        if record.activations.len() != record.tokens.len() {
            return Err(malformed(format!(
                "{} activation rows for {} tokens",
                record.activations.len(),
                record.tokens.len()
            )));
        }
        let mut activations = Array2::<f32>::zeros((record.tokens.len(), dim));
        for (r, row) in record.activations.iter().enumerate() {
            if row.len() != dim {
                return Err(LcaError::DimensionMismatch {
                    line: line_no,
                    expected: dim,
                    found: row.len(),
                });
            }
            for (c, &v) in row.iter().enumerate() {
                let v = v as f32;
                if !v.is_finite() {
                    return Err(LcaError::NonFiniteValue { line: line_no });
                }
                activations[[r, c]] = v;
            }
        }
        sentences.push(ActivationSentence {
            sentence_id: record.sentence_id,
            tokens: record.tokens,
            activations,
        });
    }
    Ok(ActivationDataset {
        manifest,
        sentences,
    })
}

pub fn write_activations(path: &Path, ds: &ActivationDataset) -> Result<()> {
    let file = File::create(path).map_err(|e| LcaError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in &ds.sentences {
        let record = ActivationRecord {
            sentence_id: s.sentence_id,
            tokens: s.tokens.clone(),
            activations: s
                .activations
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(|e| LcaError::io(path, e))?;
    }
    out.flush().map_err(|e| LcaError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Token,
    Pair,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTag {
    pub token: String,
    pub tag: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairTag {
    pub head: usize,
    pub modifier: usize,
    pub tag: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabeledSentences {
    Token(Vec<Vec<TokenTag>>),
    Pair(Vec<Vec<PairTag>>),
}

/// Per-token or per-token-pair annotations over a tag vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    pub tag_vocab: Vec<String>,
    pub sentences: LabeledSentences,
}

impl LabelSet {
    pub fn mode(&self) -> LabelMode {
        match self.sentences {
            LabeledSentences::Token(_) => LabelMode::Token,
            LabeledSentences::Pair(_) => LabelMode::Pair,
        }
    }

    pub fn num_sentences(&self) -> usize {
        match &self.sentences {
            LabeledSentences::Token(s) => s.len(),
            LabeledSentences::Pair(s) => s.len(),
        }
    }

    pub fn num_annotations(&self) -> usize {
        match &self.sentences {
            LabeledSentences::Token(s) => s.iter().map(Vec::len).sum(),
            LabeledSentences::Pair(s) => s.iter().map(Vec::len).sum(),
        }
    }

    /// Re-indexes tags against `vocab`, which must contain every tag used here.
    pub fn remap_to(&self, vocab: &[String]) -> Result<LabelSet> {
        let index: HashMap<&str, usize> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        let lookup = |tag: usize| -> Result<usize> {
            let name = &self.tag_vocab[tag];
            index.get(name.as_str()).copied().ok_or_else(|| {
                LcaError::InvalidConfig(format!("tag {name:?} missing from shared vocabulary"))
            })
        };
        let sentences = match &self.sentences {
            LabeledSentences::Token(ss) => LabeledSentences::Token(
                ss.iter()
                    .map(|s| {
                        s.iter()
                            .map(|t| {
                                Ok(TokenTag {
                                    token: t.token.clone(),
                                    tag: lookup(t.tag)?,
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            LabeledSentences::Pair(ss) => LabeledSentences::Pair(
                ss.iter()
                    .map(|s| {
                        s.iter()
                            .map(|p| {
                                Ok(PairTag {
                                    tag: lookup(p.tag)?,
                                    ..*p
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(LabelSet {
            tag_vocab: vocab.to_vec(),
            sentences,
        })
    }
}

/// Union of the vocabularies in first-occurrence order across `sets`.
pub fn shared_vocab<'a>(sets: impl IntoIterator<Item = &'a LabelSet>) -> Vec<String> {
    let mut vocab: Vec<String> = Vec::new();
    for set in sets {
        for tag in &set.tag_vocab {
            if !vocab.contains(tag) {
                vocab.push(tag.clone());
            }
        }
    }
    vocab
}

struct VocabBuilder {
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl VocabBuilder {
    fn new() -> Self {
        VocabBuilder {
            tags: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn intern(&mut self, tag: &str) -> usize {
        if let Some(&i) = self.index.get(tag) {
            return i;
        }
        let i = self.tags.len();
        self.tags.push(tag.to_string());
        self.index.insert(tag.to_string(), i);
        i
    }
}

/// Parses a label file. Token mode expects `token<TAB>tag` lines, pair mode
/// `head<TAB>modifier<TAB>tag`; blank lines separate sentences.
///
/// In token mode consecutive blank lines collapse. In pair mode every blank
/// line closes a sentence, so a sentence without pairs is written as an
/// extra blank line.
pub fn load_labels(path: &Path, mode: LabelMode) -> Result<LabelSet> {
    let file = File::open(path).map_err(|e| LcaError::io(path, e))?;
    let mut vocab = VocabBuilder::new();
    let mut token_sents: Vec<Vec<TokenTag>> = Vec::new();
    let mut pair_sents: Vec<Vec<PairTag>> = Vec::new();
    let mut cur_tokens: Vec<TokenTag> = Vec::new();
    let mut cur_pairs: Vec<PairTag> = Vec::new();
    let mut pair_open = false;

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| LcaError::io(path, e))?;
        let line = line.trim_end_matches('\r');
        let malformed = |reason: &str| LcaError::MalformedLine {
            path: path.to_path_buf(),
            line: line_no,
            reason: reason.to_string(),
        };
        if line.trim().is_empty() {
            match mode {
                LabelMode::Token => {
                    if !cur_tokens.is_empty() {
                        token_sents.push(std::mem::take(&mut cur_tokens));
                    }
                }
                LabelMode::Pair => {
                    pair_sents.push(std::mem::take(&mut cur_pairs));
                    pair_open = false;
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match mode {
            LabelMode::Token => {
                if fields.len() != 2 {
                    return Err(malformed("expected token<TAB>tag"));
                }
                if fields[1].is_empty() {
                    return Err(malformed("empty tag"));
                }
                let tag = vocab.intern(fields[1]);
                cur_tokens.push(TokenTag {
                    token: fields[0].to_string(),
                    tag,
                });
            }
            LabelMode::Pair => {
                if fields.len() != 3 {
                    return Err(malformed("expected head<TAB>modifier<TAB>tag"));
                }
                let head = fields[0]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| malformed("head index is not a non-negative integer"))?;
                let modifier = fields[1]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| malformed("modifier index is not a non-negative integer"))?;
                if fields[2].is_empty() {
                    return Err(malformed("empty tag"));
                }
                let tag = vocab.intern(fields[2]);
                cur_pairs.push(PairTag {
                    head,
                    modifier,
                    tag,
                });
                pair_open = true;
            }
        }
    }

    let sentences = match mode {
        LabelMode::Token => {
            if !cur_tokens.is_empty() {
                token_sents.push(cur_tokens);
            }
            LabeledSentences::Token(token_sents)
        }
        LabelMode::Pair => {
            if pair_open {
                pair_sents.push(cur_pairs);
            }
            LabeledSentences::Pair(pair_sents)
        }
    };
    let set = LabelSet {
        tag_vocab: vocab.tags,
        sentences,
    };
    if set.num_annotations() == 0 {
        return Err(LcaError::EmptyFile(path.to_path_buf()));
    }
    Ok(set)
}

pub fn write_labels(path: &Path, labels: &LabelSet) -> Result<()> {
    let file = File::create(path).map_err(|e| LcaError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| LcaError::io(path, e);
    match &labels.sentences {
        LabeledSentences::Token(ss) => {
            for s in ss {
                for t in s {
                    writeln!(out, "{}\t{}", t.token, labels.tag_vocab[t.tag]).map_err(io)?;
                }
                writeln!(out).map_err(io)?;
            }
        }
        LabeledSentences::Pair(ss) => {
            for s in ss {
                for p in s {
                    writeln!(out, "{}\t{}\t{}", p.head, p.modifier, labels.tag_vocab[p.tag])
                        .map_err(io)?;
                }
                writeln!(out).map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRef {
    pub sentence: usize,
    /// Token index in token mode, annotation index in pair mode.
    pub position: usize,
}

/// Flattened samples ready for probing. Pair-mode rows are `[head ; modifier]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedCorpus {
    pub mode: LabelMode,
    pub tag_vocab: Vec<String>,
    /// samples x F
    pub features: Array2<f32>,
    pub labels: Vec<usize>,
    pub word_types: Vec<String>,
    pub origins: Vec<SampleRef>,
    /// Token positions whose surface strings differ between activations and labels.
    pub token_mismatches: Vec<SampleRef>,
}

impl AlignedCorpus {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_tags(&self) -> usize {
        self.tag_vocab.len()
    }

    pub fn sample(&self, i: usize) -> ArrayView1<'_, f32> {
        self.features.row(i)
    }

    /// Sample index for a back-reference, if present.
    pub fn find(&self, origin: SampleRef) -> Option<usize> {
        self.origins.iter().position(|o| *o == origin)
    }

    /// Keeps only `columns`, in the order given.
    pub fn select_columns(&self, columns: &[usize]) -> Result<AlignedCorpus> {
        let dim = self.feature_dim();
        if let Some(&bad) = columns.iter().find(|&&c| c >= dim) {
            return Err(LcaError::IndexOutOfRange {
                index: bad,
                limit: dim,
            });
        }
        Ok(AlignedCorpus {
            features: self.features.select(Axis(1), columns),
            ..self.clone_without_features()
        })
    }

    /// Same samples, different gold labels (e.g. a control task).
    pub fn with_labels(&self, labels: Vec<usize>, tag_vocab: Vec<String>) -> Result<AlignedCorpus> {
        if labels.len() != self.num_samples() {
            return Err(LcaError::InvalidConfig(format!(
                "{} labels for {} samples",
                labels.len(),
                self.num_samples()
            )));
        }
        Ok(AlignedCorpus {
            labels,
            tag_vocab,
            ..self.clone()
        })
    }

    fn clone_without_features(&self) -> AlignedCorpus {
        AlignedCorpus {
            mode: self.mode,
            tag_vocab: self.tag_vocab.clone(),
            features: Array2::zeros((0, 0)),
            labels: self.labels.clone(),
            word_types: self.word_types.clone(),
            origins: self.origins.clone(),
            token_mismatches: self.token_mismatches.clone(),
        }
    }
}

pub fn align_corpus(ds: &ActivationDataset, labels: &LabelSet) -> Result<AlignedCorpus> {
    if ds.sentences.len() != labels.num_sentences() {
        return Err(LcaError::SentenceCountMismatch {
            activations: ds.sentences.len(),
            labels: labels.num_sentences(),
        });
    }
    let dim = ds.dim();
    let n = labels.num_annotations();
    let mode = labels.mode();
    let width = match mode {
        LabelMode::Token => dim,
        LabelMode::Pair => 2 * dim,
    };
    let mut features = Array2::<f32>::zeros((n, width));
    let mut tags = Vec::with_capacity(n);
    let mut word_types = Vec::with_capacity(n);
    let mut origins = Vec::with_capacity(n);
    let mut token_mismatches = Vec::new();
    let mut row = 0;

    match &labels.sentences {
        LabeledSentences::Token(ss) => {
            for (si, (sent, ann)) in ds.sentences.iter().zip(ss).enumerate() {
                if sent.tokens.len() != ann.len() {
                    return Err(LcaError::TokenCountMismatch {
                        sentence: si,
                        activations: sent.tokens.len(),
                        labels: ann.len(),
                    });
                }
                for (pos, tt) in ann.iter().enumerate() {
                    if sent.tokens[pos] != tt.token {
                        log::warn!(
                            "sentence {si} token {pos}: activation token {:?} != label token {:?}",
                            sent.tokens[pos],
                            tt.token
                        );
                        token_mismatches.push(SampleRef {
                            sentence: si,
                            position: pos,
                        });
                    }
                    features.row_mut(row).assign(&sent.activations.row(pos));
                    tags.push(tt.tag);
                    word_types.push(sent.tokens[pos].clone());
                    origins.push(SampleRef {
                        sentence: si,
                        position: pos,
                    });
                    row += 1;
                }
            }
        }
        LabeledSentences::Pair(ss) => {
            for (si, (sent, ann)) in ds.sentences.iter().zip(ss).enumerate() {
                let len = sent.tokens.len();
                for (ai, p) in ann.iter().enumerate() {
                    for idx in [p.head, p.modifier] {
                        if idx >= len {
                            return Err(LcaError::IndexOutOfRange {
                                index: idx,
                                limit: len,
                            });
                        }
                    }
                    let mut out = features.row_mut(row);
                    out.slice_mut(ndarray::s![..dim])
                        .assign(&sent.activations.row(p.head));
                    out.slice_mut(ndarray::s![dim..])
                        .assign(&sent.activations.row(p.modifier));
                    tags.push(p.tag);
                    word_types.push(format!(
                        "{}\u{2192}{}",
                        sent.tokens[p.head], sent.tokens[p.modifier]
                    ));
                    origins.push(SampleRef {
                        sentence: si,
                        position: ai,
                    });
                    row += 1;
                }
            }
        }
    }

    Ok(AlignedCorpus {
        mode,
        tag_vocab: labels.tag_vocab.clone(),
        features,
        labels: tags,
        word_types,
        origins,
        token_mismatches,
    })
}

/// Train/dev/test splits sharing one tag vocabulary.
#[derive(Debug, Clone)]
pub struct CorpusTriple {
    pub train: AlignedCorpus,
    pub dev: AlignedCorpus,
    pub test: AlignedCorpus,
}

impl CorpusTriple {
    pub fn feature_dim(&self) -> usize {
        self.train.feature_dim()
    }

    pub fn select_columns(&self, columns: &[usize]) -> Result<CorpusTriple> {
        Ok(CorpusTriple {
            train: self.train.select_columns(columns)?,
            dev: self.dev.select_columns(columns)?,
            test: self.test.select_columns(columns)?,
        })
    }
}

/// Aligns three splits after unifying their tag vocabularies (train tags
/// first, then tags first seen in dev, then test).
pub fn align_splits(
    datasets: [&ActivationDataset; 3],
    labels: [&LabelSet; 3],
) -> Result<CorpusTriple> {
    let vocab = shared_vocab(labels);
    if vocab.len() > labels[0].tag_vocab.len() {
        log::warn!(
            "{} tag(s) appear only in dev/test",
            vocab.len() - labels[0].tag_vocab.len()
        );
    }
    let mut out = Vec::with_capacity(3);
    for (ds, ls) in datasets.into_iter().zip(labels) {
        if ds.manifest.dim() != datasets[0].manifest.dim() {
            return Err(LcaError::FeatureDimMismatch {
                expected: datasets[0].manifest.dim(),
                found: ds.manifest.dim(),
            });
        }
        out.push(align_corpus(ds, &ls.remap_to(&vocab)?)?);
    }
    let test = out.pop().unwrap();
    let dev = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok(CorpusTriple { train, dev, test })
}

/// Word-type to pseudo-label mapping for control tasks.
///
/// Each word type draws its label once from the tag frequency distribution of
/// the label set it was fitted on. Draws are keyed by `(seed, word type)`, so
/// the mapping does not depend on sentence order or on which other types are
/// present.
#[derive(Debug, Clone)]
pub struct ControlTask {
    seed: u64,
    tag_vocab: Vec<String>,
    cumulative: Vec<f64>,
    /// Word types absent from the fitting split draw uniformly over tags.
    pub unseen_uniform: bool,
    seen: std::collections::HashSet<String>,
}

impl ControlTask {
    pub fn fit(labels: &LabelSet, seed: u64) -> Result<ControlTask> {
        let LabeledSentences::Token(ss) = &labels.sentences else {
            return Err(LcaError::PairModeUnsupported);
        };
        let mut counts = vec![0usize; labels.tag_vocab.len()];
        let mut seen = std::collections::HashSet::new();
        for t in ss.iter().flatten() {
            counts[t.tag] += 1;
            seen.insert(t.token.clone());
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(LcaError::EmptyCorpus);
        }
        let mut acc = 0usize;
        let cumulative = counts
            .iter()
            .map(|&c| {
                acc += c;
                acc as f64 / total as f64
            })
            .collect();
        Ok(ControlTask {
            seed,
            tag_vocab: labels.tag_vocab.clone(),
            cumulative,
            unseen_uniform: false,
            seen,
        })
    }

    /// Fits on an aligned token-mode corpus (its word types and gold labels).
    pub fn fit_corpus(corpus: &AlignedCorpus, seed: u64) -> Result<ControlTask> {
        if corpus.mode != LabelMode::Token {
            return Err(LcaError::PairModeUnsupported);
        }
        let labels = LabelSet {
            tag_vocab: corpus.tag_vocab.clone(),
            sentences: LabeledSentences::Token(vec![corpus
                .word_types
                .iter()
                .zip(&corpus.labels)
                .map(|(w, &tag)| TokenTag {
                    token: w.clone(),
                    tag,
                })
                .collect()]),
        };
        ControlTask::fit(&labels, seed)
    }

    /// Same samples as `corpus`, labelled with control tags.
    pub fn apply_corpus(&self, corpus: &AlignedCorpus) -> Result<AlignedCorpus> {
        if corpus.mode != LabelMode::Token {
            return Err(LcaError::PairModeUnsupported);
        }
        let mut cache: HashMap<&str, usize> = HashMap::new();
        let labels = corpus
            .word_types
            .iter()
            .map(|w| *cache.entry(w.as_str()).or_insert_with(|| self.label_for(w)))
            .collect();
        corpus.with_labels(labels, self.tag_vocab.clone())
    }

    pub fn tag_vocab(&self) -> &[String] {
        &self.tag_vocab
    }

    /// Marginal tag distribution the control labels are drawn from.
    pub fn distribution(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cumulative
            .iter()
            .map(|&c| {
                let p = c - prev;
                prev = c;
                p
            })
            .collect()
    }

    fn rng_for(&self, word: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(word.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }

    pub fn label_for(&self, word: &str) -> usize {
        let mut rng = self.rng_for(word);
        let u: f64 = rng.random();
        if self.unseen_uniform && !self.seen.contains(word) {
            return ((u * self.tag_vocab.len() as f64) as usize).min(self.tag_vocab.len() - 1);
        }
        // Skip zero-probability tags by searching for the first strict exceedance.
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or_else(|| {
                self.cumulative
                    .iter()
                    .rposition(|&c| c > 0.0)
                    .unwrap_or(0)
            })
    }

    /// Relabels every token of `labels` with its word type's control label.
    pub fn apply(&self, labels: &LabelSet) -> Result<LabelSet> {
        let LabeledSentences::Token(ss) = &labels.sentences else {
            return Err(LcaError::PairModeUnsupported);
        };
        let mut cache: HashMap<&str, usize> = HashMap::new();
        let sentences = ss
            .iter()
            .map(|s| {
                s.iter()
                    .map(|t| {
                        let tag = *cache
                            .entry(t.token.as_str())
                            .or_insert_with(|| self.label_for(&t.token));
                        TokenTag {
                            token: t.token.clone(),
                            tag,
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(LabelSet {
            tag_vocab: self.tag_vocab.clone(),
            sentences: LabeledSentences::Token(sentences),
        })
    }
}

pub fn make_control_task(labels: &LabelSet, seed: u64) -> Result<LabelSet> {
    ControlTask::fit(labels, seed)?.apply(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        p
    }

    fn manifest_json(l: usize, h: usize) -> String {
        format!(
            r#"{{"num_layers": {l}, "hidden_size": {h}, "model_name": "toy", "aggregation": "last", "dtype": "f32"}}"#
        )
    }

    #[test]
    fn smallest_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), "m.json", &manifest_json(2, 3));
        let a = write(
            dir.path(),
            "a.jsonl",
            "{\"sentence_id\": 0, \"tokens\": [\"a\", \"b\"], \"activations\": [[1,2,3,4,5,6],[0,0,0,0,0,-1.5]]}\n",
        );
        let ds = load_activations(&a, &m).unwrap();
        assert_eq!(ds.dim(), 6);
        assert_eq!(ds.sentences.len(), 1);
        assert_eq!(ds.sentences[0].activations.dim(), (2, 6));
        assert_eq!(ds.sentences[0].activations[[1, 5]], -1.5);
    }

    #[test]
    fn bert_sized_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), "m.json", &manifest_json(13, 768));
        let manifest = load_manifest(&m).unwrap();
        assert_eq!(manifest.dim(), 9984);
        assert_eq!(manifest.locate(9983).unwrap(), (12, 767));
    }

    #[test]
    fn narrow_row_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), "m.json", &manifest_json(2, 3));
        let a = write(
            dir.path(),
            "a.jsonl",
            "{\"sentence_id\": 0, \"tokens\": [\"a\"], \"activations\": [[1,2,3,4,5]]}\n",
        );
        match load_activations(&a, &m) {
            Err(LcaError::DimensionMismatch {
                line: 1,
                expected: 6,
                found: 5,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_and_non_finite_records() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), "m.json", &manifest_json(1, 2));
        let a = write(
            dir.path(),
            "a.jsonl",
            "{\"sentence_id\": 0, \"tokens\": [\"a\"], \"activations\": [[1,2]]}\nnot json\n",
        );
        assert!(matches!(
            load_activations(&a, &m),
            Err(LcaError::MalformedRecord { line: 2, .. })
        ));
        let a = write(
            dir.path(),
            "b.jsonl",
            "{\"sentence_id\": 0, \"tokens\": [\"a\"], \"activations\": [[1e300,2]]}\n",
        );
        assert!(matches!(
            load_activations(&a, &m),
            Err(LcaError::NonFiniteValue { line: 1 })
        ));
        let bad = write(dir.path(), "zero.json", &manifest_json(0, 4));
        assert!(matches!(
            load_manifest(&bad),
            Err(LcaError::InvalidManifest(_))
        ));
    }

    #[test]
    fn token_label_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "l.tsv", "the\tNN\nruns\tVB\n\n\ndog\tNN\n");
        let ls = load_labels(&p, LabelMode::Token).unwrap();
        assert_eq!(ls.tag_vocab, vec!["NN", "VB"]);
        assert_eq!(ls.num_sentences(), 2);
        assert_eq!(ls.num_annotations(), 3);

        let p = write(dir.path(), "bad.tsv", "the\tNN\nbroken\n");
        assert!(matches!(
            load_labels(&p, LabelMode::Token),
            Err(LcaError::MalformedLine { line: 2, .. })
        ));
        let p = write(dir.path(), "empty.tsv", "\n\n");
        assert!(matches!(
            load_labels(&p, LabelMode::Token),
            Err(LcaError::EmptyFile(_))
        ));
    }

    #[test]
    fn pair_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "p.tsv", "0\t2\tnsubj\n1\t2\tobj\n\n\n0\t1\tamod\n");
        let ls = load_labels(&p, LabelMode::Pair).unwrap();
        let LabeledSentences::Pair(ss) = &ls.sentences else {
            panic!()
        };
        assert_eq!(
            ss[0][0],
            PairTag {
                head: 0,
                modifier: 2,
                tag: 0
            }
        );
        // the second blank line is an empty sentence
        assert_eq!(ss.len(), 3);
        assert!(ss[1].is_empty());
        let p = write(dir.path(), "q.tsv", "0\tx\tnsubj\n");
        assert!(matches!(
            load_labels(&p, LabelMode::Pair),
            Err(LcaError::MalformedLine { .. })
        ));
    }

    fn toy_dataset(tokens: &[&str], dim_layers: usize, hidden: usize) -> ActivationDataset {
        let d = dim_layers * hidden;
        let acts = Array2::from_shape_fn((tokens.len(), d), |(r, c)| (r * 10 + c) as f32);
        ActivationDataset {
            manifest: ActivationManifest::new(dim_layers, hidden, "toy"),
            sentences: vec![ActivationSentence {
                sentence_id: 0,
                tokens: tokens.iter().map(|s| s.to_string()).collect(),
                activations: acts,
            }],
        }
    }

    fn token_labels(tokens: &[&str], tags: &[usize], vocab: &[&str]) -> LabelSet {
        LabelSet {
            tag_vocab: vocab.iter().map(|s| s.to_string()).collect(),
            sentences: LabeledSentences::Token(vec![tokens
                .iter()
                .zip(tags)
                .map(|(t, &g)| TokenTag {
                    token: t.to_string(),
                    tag: g,
                })
                .collect()]),
        }
    }

    #[test]
    fn align_token_mode() {
        let ds = toy_dataset(&["a", "b", "c"], 1, 2);
        let ls = token_labels(&["a", "B", "c"], &[0, 1, 0], &["X", "Y"]);
        let c = align_corpus(&ds, &ls).unwrap();
        assert_eq!(c.num_samples(), 3);
        assert_eq!(c.feature_dim(), 2);
        assert_eq!(c.features.row(1).to_vec(), vec![10.0, 11.0]);
        assert_eq!(c.token_mismatches.len(), 1);
        assert_eq!(c.word_types[1], "b");
        assert_eq!(
            c.find(SampleRef {
                sentence: 0,
                position: 2
            }),
            Some(2)
        );
    }

    #[test]
    fn align_token_count_mismatch() {
        let ds = toy_dataset(&["a", "b", "c"], 1, 2);
        let ls = token_labels(&["a", "b", "c", "d"], &[0, 1, 0, 1], &["X", "Y"]);
        assert!(matches!(
            align_corpus(&ds, &ls),
            Err(LcaError::TokenCountMismatch {
                sentence: 0,
                activations: 3,
                labels: 4
            })
        ));
        let two = LabelSet {
            sentences: LabeledSentences::Token(vec![vec![], vec![]]),
            ..ls
        };
        assert!(matches!(
            align_corpus(&ds, &two),
            Err(LcaError::SentenceCountMismatch { .. })
        ));
    }

    #[test]
    fn align_pair_mode_concatenates_head_first() {
        let ds = toy_dataset(&["a", "b", "c"], 1, 2);
        let ls = LabelSet {
            tag_vocab: vec!["nsubj".into(), "obj".into()],
            sentences: LabeledSentences::Pair(vec![vec![
                PairTag {
                    head: 2,
                    modifier: 0,
                    tag: 0,
                },
                PairTag {
                    head: 2,
                    modifier: 1,
                    tag: 1,
                },
            ]]),
        };
        let c = align_corpus(&ds, &ls).unwrap();
        assert_eq!(c.num_samples(), 2);
        assert_eq!(c.feature_dim(), 4);
        assert_eq!(c.features.row(0).to_vec(), vec![20.0, 21.0, 0.0, 1.0]);
        assert_eq!(c.word_types[1], "c\u{2192}b");

        let bad = LabelSet {
            sentences: LabeledSentences::Pair(vec![vec![PairTag {
                head: 3,
                modifier: 0,
                tag: 0,
            }]]),
            ..ls
        };
        assert!(matches!(
            align_corpus(&ds, &bad),
            Err(LcaError::IndexOutOfRange { index: 3, limit: 3 })
        ));
    }

    #[test]
    fn control_task_single_tag_is_identity() {
        let ls = token_labels(&["a", "b", "a"], &[0, 0, 0], &["X"]);
        assert_eq!(make_control_task(&ls, 3).unwrap(), ls);
    }

    #[test]
    fn control_task_is_deterministic_and_type_consistent() {
        let words: Vec<String> = (0..400).map(|i| format!("w{}", i % 37)).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let tags: Vec<usize> = (0..400).map(|i| i % 3).collect();
        let ls = token_labels(&refs, &tags, &["A", "B", "C"]);
        let a = make_control_task(&ls, 11).unwrap();
        let b = make_control_task(&ls, 11).unwrap();
        assert_eq!(a, b);
        let LabeledSentences::Token(ss) = &a.sentences else {
            panic!()
        };
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for t in &ss[0] {
            assert_eq!(*seen.entry(&t.token).or_insert(t.tag), t.tag);
        }
    }

    #[test]
    fn control_task_rejects_pairs() {
        let ls = LabelSet {
            tag_vocab: vec!["x".into(), "y".into()],
            sentences: LabeledSentences::Pair(vec![vec![]]),
        };
        assert!(matches!(
            make_control_task(&ls, 0),
            Err(LcaError::PairModeUnsupported)
        ));
    }

    #[test]
    fn unseen_uniform_fallback() {
        let ls = token_labels(&["a", "b"], &[0, 0], &["X", "Y"]);
        let mut ct = ControlTask::fit(&ls, 5).unwrap();
        // Y has zero frequency, so without the fallback nothing maps to it.
        let unseen: Vec<usize> = (0..200).map(|i| ct.label_for(&format!("u{i}"))).collect();
        assert!(unseen.iter().all(|&t| t == 0));
        ct.unseen_uniform = true;
        let unseen: Vec<usize> = (0..200).map(|i| ct.label_for(&format!("u{i}"))).collect();
        assert!(unseen.contains(&1));
        assert_eq!(ct.label_for("a"), 0);
    }

    #[test]
    fn remap_and_shared_vocab() {
        let a = token_labels(&["x"], &[0], &["NN"]);
        let b = token_labels(&["y", "z"], &[0, 1], &["VB", "NN"]);
        let vocab = shared_vocab([&a, &b]);
        assert_eq!(vocab, vec!["NN", "VB"]);
        let r = b.remap_to(&vocab).unwrap();
        let LabeledSentences::Token(ss) = &r.sentences else {
            panic!()
        };
        assert_eq!(ss[0][0].tag, 1);
        assert_eq!(ss[0][1].tag, 0);
    }

    #[test]
    fn activations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(&["a", "b"], 2, 3);
        write_activations(&dir.path().join("a.jsonl"), &ds).unwrap();
        write_manifest(&dir.path().join("m.json"), &ds.manifest).unwrap();
        let back = load_activations(&dir.path().join("a.jsonl"), &dir.path().join("m.json")).unwrap();
        assert_eq!(back, ds);
    }
}
