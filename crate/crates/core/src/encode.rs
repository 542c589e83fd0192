//! Fixed-shape model inputs: tokenized text, sampled clip features and MLM corruption.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::VqaTriplet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Label value at positions that carry no MLM target.
pub const IGNORE_LABEL: i64 = -1;

/// Text tokenization with BERT-style special tokens.
pub trait TokenizerPort: Send + Sync {
    fn tokenize(&self, text: &str) -> Result<Vec<u32>>;
    fn vocab_size(&self) -> usize;
    fn cls_id(&self) -> u32;
    fn sep_id(&self) -> u32;
    fn mask_id(&self) -> u32;
    fn pad_id(&self) -> u32;

    fn is_special(&self, id: u32) -> bool {
        id == self.cls_id() || id == self.sep_id() || id == self.mask_id() || id == self.pad_id()
    }
}

const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];
const UNK_ID: u32 = 4;

/// Lower-cased whitespace tokenizer over a closed word list.
///
/// Ids 0..5 are `[PAD] [CLS] [SEP] [MASK] [UNK]`; words follow in sorted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhitespaceTokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

fn normalize_word(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

impl WhitespaceTokenizer {
    /// Vocabulary of every word in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .map(normalize_word)
            .filter(|w| !w.is_empty())
            .collect();
        Self::from_words(words.into_iter().collect())
    }

    /// Builds from the non-special words, in the given order.
    pub fn from_words(words: Vec<String>) -> Self {
        let mut vocab: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        vocab.extend(
            words
                .into_iter()
                .filter(|w| !SPECIAL_TOKENS.contains(&w.as_str())),
        );
        let mut tok = Self {
            vocab,
            index: HashMap::new(),
        };
        tok.rebuild_index();
        tok
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    /// Words after the special tokens, the form stored in checkpoints.
    pub fn words(&self) -> &[String] {
        &self.vocab[SPECIAL_TOKENS.len()..]
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }
}

impl TokenizerPort for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        Ok(text
            .split_whitespace()
            .map(normalize_word)
            .filter(|w| !w.is_empty())
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK_ID))
            .collect())
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn cls_id(&self) -> u32 {
        1
    }

    fn sep_id(&self) -> u32 {
        2
    }

    fn mask_id(&self) -> u32 {
        3
    }

    fn pad_id(&self) -> u32 {
        0
    }
}

/// `[CLS] tokens [SEP]` truncated to `max_len` (keeping the head) and padded.
pub fn encode_text(
    text: &str,
    tokenizer: &dyn TokenizerPort,
    max_len: usize,
) -> Result<(Vec<u32>, Vec<bool>)> {
    if max_len < 2 {
        return Err(Error::Precondition(format!(
            "max_len {max_len} leaves no room for [CLS] and [SEP]"
        )));
    }
    let tokens = tokenizer.tokenize(text)?;
    let keep = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(tokenizer.cls_id());
    ids.extend_from_slice(&tokens[..keep]);
    ids.push(tokenizer.sep_id());
    Ok(pad(ids, tokenizer.pad_id(), max_len))
}

/// `[CLS] question [SEP] answer [SEP]` within `max_len`; when both parts are
/// long each keeps at least half of the budget.
pub fn encode_text_pair(
    question: &str,
    answer: &str,
    tokenizer: &dyn TokenizerPort,
    max_len: usize,
) -> Result<(Vec<u32>, Vec<bool>)> {
    if max_len < 3 {
        return Err(Error::Precondition(format!(
            "max_len {max_len} is too short for a text pair"
        )));
    }
    let q = tokenizer.tokenize(question)?;
    let a = tokenizer.tokenize(answer)?;
    let budget = max_len - 3;
    let a_keep = a.len().min(budget - q.len().min(budget / 2));
    let q_keep = q.len().min(budget - a_keep);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(tokenizer.cls_id());
    ids.extend_from_slice(&q[..q_keep]);
    ids.push(tokenizer.sep_id());
    ids.extend_from_slice(&a[..a_keep]);
    ids.push(tokenizer.sep_id());
    Ok(pad(ids, tokenizer.pad_id(), max_len))
}

fn pad(mut ids: Vec<u32>, pad_id: u32, max_len: usize) -> (Vec<u32>, Vec<bool>) {
    let mut mask = vec![true; ids.len()];
    ids.resize(max_len, pad_id);
    mask.resize(max_len, false);
    (ids, mask)
}

/// Selects `t` equally spaced rows (or zero-pads short clips).
pub fn sample_video_features<T: Scalar>(
    features: &Matrix<T>,
    t: usize,
) -> Result<(Matrix<T>, Vec<bool>)> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::Empty("clip has no feature rows".into()));
    }
    if t == 0 {
        return Err(Error::Precondition("t must be positive".into()));
    }
    let mut out = Matrix::zeros(t, features.cols());
    let mut mask = vec![false; t];
    let indices: Vec<usize> = if n >= t {
        sample_indices(n, t)
    } else {
        (0..n).collect()
    };
    for (j, &i) in indices.iter().enumerate() {
        out.row_mut(j).copy_from_slice(features.row(i));
        mask[j] = true;
    }
    Ok((out, mask))
}

/// `round(j·(n−1)/(t−1))` for `j = 0..t`.
pub fn sample_indices(n: usize, t: usize) -> Vec<usize> {
    if t == 1 {
        return vec![0];
    }
    (0..t)
        .map(|j| ((j * (n - 1)) as f64 / (t - 1) as f64).round() as usize)
        .collect()
}

/// Per-second clip features.
pub trait FeatureStore<T: Scalar>: Send + Sync {
    /// Rows `floor(start_s) .. floor(start_s) + max(floor(end_s) − floor(start_s), 1)`,
    /// clipped to the rows the video has.
    fn lookup(&self, video_id: &str, start_s: f64, end_s: f64) -> Result<Matrix<T>>;

    fn feature_dim(&self) -> Option<usize>;
}

fn clip_rows<T: Scalar>(
    video_id: &str,
    all: &Matrix<T>,
    start_s: f64,
    end_s: f64,
) -> Result<Matrix<T>> {
    if !(start_s.is_finite() && end_s.is_finite()) || start_s < 0.0 || end_s < start_s {
        return Err(Error::MissingFeatures {
            video_id: video_id.to_owned(),
            message: format!("invalid clip range {start_s}..{end_s}"),
        });
    }
    let first = start_s.floor() as usize;
    let count = (end_s.floor() as usize).saturating_sub(first).max(1);
    if first >= all.rows() {
        return Err(Error::MissingFeatures {
            video_id: video_id.to_owned(),
            message: format!(
                "clip starts at row {first} but the video has {} rows",
                all.rows()
            ),
        });
    }
    let last = (first + count).min(all.rows());
    let mut data = Vec::with_capacity((last - first) * all.cols());
    for r in first..last {
        data.extend_from_slice(all.row(r));
    }
    Matrix::from_vec(last - first, all.cols(), data)
}

/// Features held in memory, keyed by video id.
#[derive(Debug, Clone, Default)]
pub struct InMemoryFeatures<T> {
    videos: HashMap<String, Matrix<T>>,
}

impl<T: Scalar> InMemoryFeatures<T> {
    pub fn new() -> Self {
        Self {
            videos: HashMap::new(),
        }
    }

    pub fn insert(&mut self, video_id: impl Into<String>, features: Matrix<T>) {
        self.videos.insert(video_id.into(), features);
    }
}

impl<T: Scalar> FeatureStore<T> for InMemoryFeatures<T> {
    fn lookup(&self, video_id: &str, start_s: f64, end_s: f64) -> Result<Matrix<T>> {
        let all = self
            .videos
            .get(video_id)
            .ok_or_else(|| Error::MissingFeatures {
                video_id: video_id.to_owned(),
                message: "no features stored".into(),
            })?;
        clip_rows(video_id, all, start_s, end_s)
    }

    fn feature_dim(&self) -> Option<usize> {
        self.videos.values().next().map(Matrix::cols)
    }
}

/// A directory of `<video_id>.feat` files, read lazily and cached.
pub struct FeatureDir<T> {
    root: PathBuf,
    cache: RwLock<HashMap<String, Matrix<T>>>,
}

impl<T: Scalar> FeatureDir<T> {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn path_for(&self, video_id: &str) -> PathBuf {
        self.root.join(format!("{video_id}.feat"))
    }

    fn load(&self, video_id: &str) -> Result<Matrix<T>> {
        if let Some(m) = self
            .cache
            .read()
            .expect("feature cache poisoned")
            .get(video_id)
        {
            return Ok(m.clone());
        }
        let path = self.path_for(video_id);
        let m = read_feature_file::<T>(&path).map_err(|e| Error::MissingFeatures {
            video_id: video_id.to_owned(),
            message: e.to_string(),
        })?;
        self.cache
            .write()
            .expect("feature cache poisoned")
            .insert(video_id.to_owned(), m.clone());
        Ok(m)
    }
}

impl<T: Scalar> FeatureStore<T> for FeatureDir<T> {
    fn lookup(&self, video_id: &str, start_s: f64, end_s: f64) -> Result<Matrix<T>> {
        let all = self.load(video_id)?;
        clip_rows(video_id, &all, start_s, end_s)
    }

    fn feature_dim(&self) -> Option<usize> {
        self.cache.read().ok()?.values().next().map(Matrix::cols)
    }
}

/// Writes the `.feat` layout: `u32 n_rows, u32 d_v` little-endian, then row-major `f32` values.
pub fn write_feature_file<T: Scalar>(path: &Path, features: &Matrix<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_all(&(features.rows() as u32).to_le_bytes())
        .map_err(io)?;
    out.write_all(&(features.cols() as u32).to_le_bytes())
        .map_err(io)?;
    for &v in features.data() {
        out.write_all(&(v.as_f64() as f32).to_le_bytes())
            .map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_feature_file<T: Scalar>(path: &Path) -> Result<Matrix<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|m| Error::validation(path.display().to_string(), m))
}

fn decode_features<T: Scalar>(bytes: &[u8]) -> std::result::Result<Matrix<T>, String> {
    if bytes.len() < 8 {
        return Err("feature file shorter than its header".into());
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 4 {
        return Err(format!(
            "expected {} payload bytes for {rows}x{cols}, found {}",
            rows * cols * 4,
            body.len()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())
}

/// Outcome of the MLM draw for one eligible position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlmDecision {
    Keep,
    /// Corrupted, replaced with `[MASK]`.
    Mask,
    /// Corrupted, token left as is.
    Unchanged,
    /// Corrupted, replaced with the given id.
    Random(u32),
}

pub const MLM_CORRUPT_PROB: f64 = 0.15;
pub const MLM_MASK_SHARE: f64 = 0.8;
pub const MLM_UNCHANGED_SHARE: f64 = 0.1;

/// Draws one decision: corrupt with probability 0.15, then 80 / 10 / 10 between
/// `[MASK]`, unchanged and a uniform random vocabulary id.
pub fn draw_mlm_decision(rng: &mut impl Rng, vocab_size: usize) -> MlmDecision {
    if rng.gen::<f64>() >= MLM_CORRUPT_PROB {
        return MlmDecision::Keep;
    }
    let branch = rng.gen::<f64>();
    if branch < MLM_MASK_SHARE {
        MlmDecision::Mask
    } else if branch < MLM_MASK_SHARE + MLM_UNCHANGED_SHARE {
        MlmDecision::Unchanged
    } else {
        MlmDecision::Random(rng.gen_range(0..vocab_size as u32))
    }
}

/// Applies MLM decisions to the non-special, non-pad positions of `ids`.
pub fn corrupt_for_mlm_with(
    ids: &[u32],
    mask: &[bool],
    tokenizer: &dyn TokenizerPort,
    mut decide: impl FnMut(usize) -> MlmDecision,
) -> (Vec<u32>, Vec<i64>) {
    let mut out = ids.to_vec();
    let mut labels = vec![IGNORE_LABEL; ids.len()];
    for (pos, (&id, &valid)) in ids.iter().zip(mask).enumerate() {
        if !valid || tokenizer.is_special(id) {
            continue;
        }
        let replacement = match decide(pos) {
            MlmDecision::Keep => continue,
            MlmDecision::Mask => tokenizer.mask_id(),
            MlmDecision::Unchanged => id,
            MlmDecision::Random(r) => r,
        };
        out[pos] = replacement;
        labels[pos] = id as i64;
    }
    (out, labels)
}

pub fn corrupt_for_mlm(
    ids: &[u32],
    mask: &[bool],
    tokenizer: &dyn TokenizerPort,
    rng: &mut impl Rng,
) -> (Vec<u32>, Vec<i64>) {
    let vocab = tokenizer.vocab_size();
    corrupt_for_mlm_with(ids, mask, tokenizer, |_| draw_mlm_decision(rng, vocab))
}

/// Sequence lengths of the model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub question_len: usize,
    pub video_len: usize,
    pub answer_len: usize,
    pub mlm: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            question_len: 20,
            video_len: 20,
            answer_len: 10,
            mlm: true,
        }
    }
}

/// Padded, fixed-shape inputs for a batch of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch<T> {
    pub question_ids: Vec<Vec<u32>>,
    pub question_mask: Vec<Vec<bool>>,
    pub answer_ids: Vec<Vec<u32>>,
    pub answer_mask: Vec<Vec<bool>>,
    /// One `t × d_v` matrix per sample.
    pub video_features: Vec<Matrix<T>>,
    pub video_mask: Vec<Vec<bool>>,
    pub mlm_labels: Vec<Vec<i64>>,
    pub answer_strings: Vec<String>,
}

impl<T: Scalar> EncodedBatch<T> {
    pub fn len(&self) -> usize {
        self.question_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.question_ids.is_empty()
    }

    /// Keeps the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let pick = |v: &Vec<Vec<u32>>| indices.iter().map(|&i| v[i].clone()).collect();
        let pick_b = |v: &Vec<Vec<bool>>| indices.iter().map(|&i| v[i].clone()).collect();
        Self {
            question_ids: pick(&self.question_ids),
            question_mask: pick_b(&self.question_mask),
            answer_ids: pick(&self.answer_ids),
            answer_mask: pick_b(&self.answer_mask),
            video_features: indices
                .iter()
                .map(|&i| self.video_features[i].clone())
                .collect(),
            video_mask: pick_b(&self.video_mask),
            mlm_labels: indices
                .iter()
                .map(|&i| self.mlm_labels[i].clone())
                .collect(),
            answer_strings: indices
                .iter()
                .map(|&i| self.answer_strings[i].clone())
                .collect(),
        }
    }
}

/// Looks up and samples the features of one clip.
pub fn encode_clip<T: Scalar>(
    store: &dyn FeatureStore<T>,
    video_id: &str,
    start_s: f64,
    end_s: f64,
    t: usize,
) -> Result<(Matrix<T>, Vec<bool>)> {
    let rows = store.lookup(video_id, start_s, end_s)?;
    sample_video_features(&rows, t).map_err(|e| Error::MissingFeatures {
        video_id: video_id.to_owned(),
        message: e.to_string(),
    })
}

/// Encodes triplets into a batch; MLM corruption draws from `rng` in sample order.
pub fn assemble_batch<T: Scalar>(
    triplets: &[VqaTriplet],
    store: &dyn FeatureStore<T>,
    tokenizer: &dyn TokenizerPort,
    cfg: &EncodingConfig,
    rng: &mut impl Rng,
) -> Result<EncodedBatch<T>> {
    if triplets.is_empty() {
        return Err(Error::Empty("batch without samples".into()));
    }
    let mut batch = EncodedBatch {
        question_ids: Vec::with_capacity(triplets.len()),
        question_mask: Vec::with_capacity(triplets.len()),
        answer_ids: Vec::with_capacity(triplets.len()),
        answer_mask: Vec::with_capacity(triplets.len()),
        video_features: Vec::with_capacity(triplets.len()),
        video_mask: Vec::with_capacity(triplets.len()),
        mlm_labels: Vec::with_capacity(triplets.len()),
        answer_strings: Vec::with_capacity(triplets.len()),
    };
    for t in triplets {
        let (q_ids, q_mask) = encode_text(&t.question, tokenizer, cfg.question_len)?;
        let (a_ids, a_mask) = encode_text(&t.answer, tokenizer, cfg.answer_len)?;
        let (feats, v_mask) = encode_clip(store, &t.video_id, t.start_s, t.end_s, cfg.video_len)?;
        let (q_ids, labels) = if cfg.mlm {
            corrupt_for_mlm(&q_ids, &q_mask, tokenizer, rng)
        } else {
            let n = q_ids.len();
            (q_ids, vec![IGNORE_LABEL; n])
        };
        batch.question_ids.push(q_ids);
        batch.question_mask.push(q_mask);
        batch.answer_ids.push(a_ids);
        batch.answer_mask.push(a_mask);
        batch.video_features.push(feats);
        batch.video_mask.push(v_mask);
        batch.mlm_labels.push(labels);
        batch.answer_strings.push(t.answer.clone());
    }
    Ok(batch)
}
