//! Training loops: contrastive pretraining, finetuning with validation-based
//! selection, and matching-head pretraining on narration.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::corpus::{aggregate_segments, NarratedVideo, VqaTriplet};
use crate::encode::{
    assemble_batch, corrupt_for_mlm, encode_clip, encode_text, FeatureStore, TokenizerPort,
};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_samples, AnswerVocabulary, EvalOptions, EvalSample, GroundTruth};
use crate::model::{Mode, ParamStore, VqaT};
use crate::objectives::{
    contrastive_graph, finetune_graph, matching_graph, mlm_graph, multiple_choice_graph, LossBundle,
};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Finetune,
    MatchingPretrain,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
            Phase::MatchingPretrain => "matching-pretrain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub initial_lr: f64,
    pub epochs: usize,
    pub batch_clips: usize,
    /// Distinct videos drawn per batch; ignored by finetuning.
    pub videos_per_batch: usize,
    pub seed: u64,
    pub data_fraction: f64,
    pub mlm: bool,
    pub dedup: bool,
    pub lambda_mlm: f64,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::defaults(Phase::Pretrain)
    }
}

impl TrainConfig {
    pub fn defaults(phase: Phase) -> Self {
        let (initial_lr, epochs, batch_clips) = match phase {
            Phase::Pretrain | Phase::MatchingPretrain => (5e-5, 10, 4096),
            Phase::Finetune => (1e-5, 20, 256),
        };
        Self {
            phase,
            initial_lr,
            epochs,
            batch_clips,
            videos_per_batch: 128,
            seed: 0,
            data_fraction: 1.0,
            mlm: true,
            dedup: true,
            lambda_mlm: crate::objectives::LAMBDA_MLM,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::validation("train config", m));
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return fail(format!(
                "initial_lr must be positive, got {}",
                self.initial_lr
            ));
        }
        if self.epochs == 0 || self.batch_clips == 0 || self.videos_per_batch == 0 {
            return fail("epochs, batch_clips and videos_per_batch must be at least 1".into());
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return fail(format!(
                "data_fraction must lie in (0, 1], got {}",
                self.data_fraction
            ));
        }
        if !(self.lambda_mlm.is_finite() && self.lambda_mlm >= 0.0) {
            return fail(format!(
                "lambda_mlm must be non-negative, got {}",
                self.lambda_mlm
            ));
        }
        if self.max_steps == Some(0) {
            return fail("max_steps must be at least 1".into());
        }
        Ok(())
    }

    fn expect_phase(&self, phase: Phase) -> Result<()> {
        self.validate()?;
        if self.phase != phase {
            return Err(Error::Precondition(format!(
                "config is for {}, not {}",
                self.phase.as_str(),
                phase.as_str()
            )));
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate.
pub fn lr_at(step: usize, total_steps: usize, initial_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Precondition("total_steps must be at least 1".into()));
    }
    if step > total_steps {
        return Err(Error::Precondition(format!(
            "step {step} beyond {total_steps} total steps"
        )));
    }
    Ok(initial_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}

/// Adam without weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Option<Matrix<T>>>,
    v: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (id, grad) in grads.params() {
            let Some(grad) = grad else { continue };
            let m = self.m[id.0].get_or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            let v = self.v[id.0].get_or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            let p = params.get_mut(id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad.data())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= lr * update;
            }
        }
    }
}

/// 64-bit FNV-1a.
pub fn stable_hash(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The first `ceil(fraction · n)` distinct video ids by ascending hash, so
/// smaller fractions select subsets of larger ones.
pub fn select_fraction<'a>(
    video_ids: impl IntoIterator<Item = &'a str>,
    fraction: f64,
) -> Result<HashSet<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::validation(
            "data fraction",
            format!("{fraction} is outside (0, 1]"),
        ));
    }
    let mut ids: Vec<&str> = video_ids
        .into_iter()
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    ids.sort_by_key(|id| (stable_hash(id), *id));
    let keep = (fraction * ids.len() as f64).ceil() as usize;
    Ok(ids.into_iter().take(keep).map(str::to_string).collect())
}

pub fn subset_triplets(triplets: &[VqaTriplet], fraction: f64) -> Result<Vec<VqaTriplet>> {
    let keep = select_fraction(triplets.iter().map(|t| t.video_id.as_str()), fraction)?;
    Ok(triplets
        .iter()
        .filter(|t| keep.contains(&t.video_id))
        .cloned()
        .collect())
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub contrastive: f64,
    pub mlm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matching: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_top1: Option<f64>,
}

/// Hooks called by the loops; checkpointing lives here.
pub trait TrainObserver<T: Scalar> {
    fn on_step(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }

    /// Called after every epoch with the current weights.
    fn on_epoch(&mut self, _epoch: usize, _model: &VqaT<T>, _val_top1: Option<f64>) -> Result<()> {
        Ok(())
    }
}

impl<T: Scalar> TrainObserver<T> for () {}

/// Writes each record as one JSON line.
pub struct NdjsonLog<W: Write> {
    pub out: W,
}

impl<T: Scalar, W: Write> TrainObserver<T> for NdjsonLog<W> {
    fn on_step(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io("metrics log", e))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub losses: Vec<LossBundle>,
    /// Validation top-1 after each epoch (finetuning only).
    pub val_top1: Vec<f64>,
    /// 1-based epoch whose weights were kept (finetuning only).
    pub best_epoch: Option<usize>,
}

/// 1-based epoch with the highest validation score; ties keep the earliest.
pub fn select_best_epoch(val_top1: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in val_top1.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i + 1, v));
        }
    }
    best.map(|b| b.0)
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_BATCHES: u64 = 1;
const STREAM_MLM: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_NEGATIVES: u64 = 4;

/// Item indices of a batch: distinct random videos, their clips pooled and
/// shuffled, then truncated. More videos are added while fewer than
/// `min_items` clips are pooled.
fn sample_batch(
    groups: &[Vec<usize>],
    cfg: &TrainConfig,
    min_items: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    let mut pool = Vec::new();
    for (n, &v) in order.iter().enumerate() {
        if n >= cfg.videos_per_batch && pool.len() >= min_items {
            break;
        }
        pool.extend_from_slice(&groups[v]);
    }
    pool.shuffle(rng);
    pool.truncate(cfg.batch_clips.max(min_items));
    pool
}

fn group_by_video<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, id) in ids.enumerate() {
        groups.entry(id).or_default().push(i);
    }
    groups.into_values().collect()
}

fn total_steps(cfg: &TrainConfig, steps_per_epoch: usize) -> usize {
    let all = cfg.epochs * steps_per_epoch;
    cfg.max_steps.map_or(all, |m| m.min(all))
}

/// Mean MLM loss over every labeled question position, if any.
fn mlm_term<T: Scalar>(
    model: &VqaT<T>,
    g: &mut Graph<T>,
    states: &[Var],
    labels: &[Vec<i64>],
) -> Result<Option<Var>> {
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    for (&s, l) in states.iter().zip(labels) {
        if let Some((z, t)) = model.mlm_logits(g, s, l)? {
            logits.push(z);
            targets.extend(t);
        }
    }
    if logits.is_empty() {
        return Ok(None);
    }
    let z = g.concat_rows(&logits)?;
    Ok(Some(mlm_graph(g, z, &targets)?))
}

/// `main + λ·mlm`, with the MLM node left out when disabled.
fn combine<T: Scalar>(
    g: &mut Graph<T>,
    main: Var,
    mlm: Option<Var>,
    cfg: &TrainConfig,
) -> Result<(Var, f64)> {
    match mlm {
        Some(m) if cfg.mlm && cfg.lambda_mlm != 0.0 => {
            let mv = g.scalar(m).as_f64();
            Ok((
                g.weighted_sum(&[(main, T::one()), (m, T::of(cfg.lambda_mlm))])?,
                mv,
            ))
        }
        _ => Ok((main, 0.0)),
    }
}

/// Records the pretraining objective for an encoded batch.
pub fn pretrain_objective<T: Scalar>(
    model: &VqaT<T>,
    g: &mut Graph<T>,
    batch: &crate::encode::EncodedBatch<T>,
    cfg: &TrainConfig,
    mode: &mut Mode<'_>,
) -> Result<(Var, LossBundle)> {
    let out = model.forward_batch(g, batch, mode)?;
    let per_sample =
        contrastive_graph(g, out.fused, out.answers, &batch.answer_strings, cfg.dedup)?;
    let contrastive = g.mean(per_sample)?;
    let mlm = if cfg.mlm {
        mlm_term(model, g, &out.question_states, &batch.mlm_labels)?
    } else {
        None
    };
    let (root, mlm_value) = combine(g, contrastive, mlm, cfg)?;
    let c = g.scalar(contrastive).as_f64();
    let bundle = LossBundle::new(
        c,
        mlm_value,
        0.0,
        if cfg.mlm { cfg.lambda_mlm } else { 0.0 },
    )?;
    Ok((root, bundle))
}

fn record(step: usize, epoch: usize, lr: f64, loss: &LossBundle, matching: bool) -> MetricsRecord {
    MetricsRecord {
        step,
        epoch,
        lr,
        loss: loss.total,
        contrastive: loss.contrastive,
        mlm: loss.mlm,
        matching: matching.then_some(loss.matching),
        val_top1: None,
    }
}

/// Contrastive + MLM pretraining on generated triplets.
pub fn pretrain<T: Scalar>(
    model: &mut VqaT<T>,
    triplets: &[VqaTriplet],
    store: &dyn FeatureStore<T>,
    tokenizer: &dyn TokenizerPort,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome> {
    cfg.expect_phase(Phase::Pretrain)?;
    let data = subset_triplets(triplets, cfg.data_fraction)?;
    if data.is_empty() {
        return Err(Error::Empty("no pretraining triplets".into()));
    }
    let groups = group_by_video(data.iter().map(|t| t.video_id.as_str()));
    let steps_per_epoch = data.len().div_ceil(cfg.batch_clips);
    let total = total_steps(cfg, steps_per_epoch);
    let enc = model.config().encoding(cfg.mlm);
    let (mut batch_rng, mut mlm_rng, mut drop_rng) = (
        rng_stream(cfg.seed, STREAM_BATCHES),
        rng_stream(cfg.seed, STREAM_MLM),
        rng_stream(cfg.seed, STREAM_DROPOUT),
    );
    let mut adam = Adam::new(model.params().len());
    let mut outcome = TrainOutcome::default();
    for step in 0..total {
        let epoch = step / steps_per_epoch + 1;
        let picked: Vec<VqaTriplet> = sample_batch(&groups, cfg, 1, &mut batch_rng)
            .into_iter()
            .map(|i| data[i].clone())
            .collect();
        let batch = assemble_batch(&picked, store, tokenizer, &enc, &mut mlm_rng)?;
        let mut g = Graph::new();
        let (root, loss) =
            pretrain_objective(model, &mut g, &batch, cfg, &mut Mode::Train(&mut drop_rng))?;
        let lr = lr_at(step, total, cfg.initial_lr)?;
        let grads = g.backward(root)?;
        adam.step(model.params_mut(), &grads, lr);
        observer.on_step(&record(step + 1, epoch, lr, &loss, false))?;
        outcome.losses.push(loss);
        outcome.steps = step + 1;
        if (step + 1) % steps_per_epoch == 0 || step + 1 == total {
            observer.on_epoch(epoch, model, None)?;
        }
    }
    Ok(outcome)
}

struct EncodedAnswers {
    ids: Vec<Vec<u32>>,
    masks: Vec<Vec<bool>>,
}

fn encode_answers<'a>(
    answers: impl IntoIterator<Item = &'a String>,
    tokenizer: &dyn TokenizerPort,
    m: usize,
) -> Result<EncodedAnswers> {
    let (ids, masks) = answers
        .into_iter()
        .map(|a| encode_text(a, tokenizer, m))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(EncodedAnswers { ids, masks })
}

/// A finetuning sample with its training target resolved.
enum Target {
    Vocab(usize),
    Choice {
        candidates: EncodedAnswers,
        correct: usize,
    },
}

/// Cross-entropy finetuning on a downstream split.
///
/// Open-ended and iVQA samples train against the full vocabulary (samples
/// whose answer is outside it are skipped); multiple-choice samples train
/// against their own four candidates. The weights of the epoch with the best
/// validation top-1 are kept; without validation samples the last epoch wins.
#[allow(clippy::too_many_arguments)]
pub fn finetune<T: Scalar>(
    model: &mut VqaT<T>,
    train: &[EvalSample],
    val: &[EvalSample],
    vocab: Option<&AnswerVocabulary>,
    store: &dyn FeatureStore<T>,
    tokenizer: &dyn TokenizerPort,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome> {
    cfg.expect_phase(Phase::Finetune)?;
    if vocab.is_some_and(AnswerVocabulary::is_empty) {
        return Err(Error::Empty("answer vocabulary".into()));
    }
    let m = model.config().answer_len;
    let mut items = Vec::new();
    for s in train {
        let target = match &s.ground_truth {
            GroundTruth::MultipleChoice {
                candidates,
                correct,
            } => Some(Target::Choice {
                candidates: encode_answers(candidates, tokenizer, m)?,
                correct: *correct,
            }),
            gt => {
                let v = vocab.ok_or_else(|| {
                    Error::Precondition("open-ended finetuning needs an answer vocabulary".into())
                })?;
                v.get(gt.primary()).map(Target::Vocab)
            }
        };
        if let Some(t) = target {
            items.push((s, t));
        }
    }
    if items.is_empty() {
        return Err(Error::Empty(
            "no finetuning samples with an in-vocabulary answer".into(),
        ));
    }
    let vocab_enc = vocab
        .map(|v| encode_answers(v.answers(), tokenizer, m))
        .transpose()?;
    let steps_per_epoch = items.len().div_ceil(cfg.batch_clips);
    let total = total_steps(cfg, steps_per_epoch);
    let (mut batch_rng, mut mlm_rng, mut drop_rng) = (
        rng_stream(cfg.seed, STREAM_BATCHES),
        rng_stream(cfg.seed, STREAM_MLM),
        rng_stream(cfg.seed, STREAM_DROPOUT),
    );
    let mut adam = Adam::new(model.params().len());
    let mut outcome = TrainOutcome::default();
    let mut best: Option<(f64, ParamStore<T>)> = None;
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut batch_rng);
        for (k, chunk) in order.chunks(cfg.batch_clips).enumerate() {
            if step == total {
                break 'epochs;
            }
            let mut g = Graph::new();
            let mut mode = Mode::Train(&mut drop_rng);
            let mut losses = Vec::with_capacity(chunk.len());
            let mut states = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            let mut open: Vec<(Var, usize)> = Vec::new();
            for &i in chunk {
                let (s, target) = &items[i];
                let c = model.config();
                let (video, vmask) =
                    encode_clip(store, &s.video_id, s.start_s, s.end_s, c.video_len)?;
                let (ids, qmask) = encode_text(&s.question, tokenizer, c.question_len)?;
                let (ids, lab) = if cfg.mlm {
                    corrupt_for_mlm(&ids, &qmask, tokenizer, &mut mlm_rng)
                } else {
                    let n = ids.len();
                    (ids, vec![crate::encode::IGNORE_LABEL; n])
                };
                let f = model.fuse(&mut g, &ids, &qmask, &video, &vmask, &mut mode)?;
                states.push(f.question_states);
                labels.push(lab);
                match target {
                    Target::Vocab(t) => open.push((f.embedding, *t)),
                    Target::Choice {
                        candidates,
                        correct,
                    } => {
                        let table =
                            model.answers(&mut g, &candidates.ids, &candidates.masks, &mut mode)?;
                        losses.push(multiple_choice_graph(&mut g, f.embedding, table, *correct)?);
                    }
                }
            }
            if !open.is_empty() {
                let enc = vocab_enc.as_ref().expect("open targets imply a vocabulary");
                let table = model.answers(&mut g, &enc.ids, &enc.masks, &mut mode)?;
                let rows: Vec<Var> = open.iter().map(|o| o.0).collect();
                let targets: Vec<usize> = open.iter().map(|o| o.1).collect();
                let fused = g.concat_rows(&rows)?;
                losses.push(finetune_graph(&mut g, fused, table, &targets)?);
            }
            // Per-sample losses are stacked so the mean runs over samples.
            let stacked = g.concat_rows(&losses)?;
            let main = g.mean(stacked)?;
            let mlm = if cfg.mlm {
                mlm_term(model, &mut g, &states, &labels)?
            } else {
                None
            };
            let (root, mlm_value) = combine(&mut g, main, mlm, cfg)?;
            let loss = LossBundle::new(
                g.scalar(main).as_f64(),
                mlm_value,
                0.0,
                if cfg.mlm { cfg.lambda_mlm } else { 0.0 },
            )?;
            let lr = lr_at(step, total, cfg.initial_lr)?;
            let grads = g.backward(root)?;
            adam.step(model.params_mut(), &grads, lr);
            step += 1;
            let mut rec = record(step, epoch, lr, &loss, false);
            outcome.losses.push(loss);
            let epoch_done = k + 1 == steps_per_epoch || step == total;
            if epoch_done {
                let val_top1 = if val.is_empty() {
                    None
                } else {
                    Some(
                        evaluate_samples(
                            model,
                            val,
                            vocab,
                            store,
                            tokenizer,
                            &EvalOptions::default(),
                        )?
                        .0
                        .top1,
                    )
                };
                rec.val_top1 = val_top1;
                observer.on_step(&rec)?;
                observer.on_epoch(epoch, model, val_top1)?;
                let score = val_top1.unwrap_or(f64::INFINITY);
                if let Some(v) = val_top1 {
                    outcome.val_top1.push(v);
                }
                if val.is_empty() || best.as_ref().is_none_or(|(b, _)| score > *b) {
                    best = Some((score, model.params().clone()));
                    outcome.best_epoch = Some(epoch);
                }
            } else {
                observer.on_step(&rec)?;
            }
        }
    }
    outcome.steps = step;
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    Ok(outcome)
}

/// A narration clip: aggregated transcript text with its time range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrationClip {
    pub video_id: String,
    #[serde(rename = "start")]
    pub start_s: f64,
    #[serde(rename = "end")]
    pub end_s: f64,
    pub text: String,
}

/// Aggregated narration segments of every video, as clips.
pub fn narration_clips(
    videos: &[NarratedVideo],
    min_duration_s: f64,
    min_words: usize,
) -> Vec<NarrationClip> {
    videos
        .iter()
        .flat_map(|v| {
            aggregate_segments(v, min_duration_s, min_words)
                .segments
                .into_iter()
                .map(move |s| NarrationClip {
                    video_id: v.video_id.clone(),
                    start_s: s.start_s,
                    end_s: s.end_s,
                    text: s.text,
                })
        })
        .collect()
}

/// A random index in `0..n` other than `i`.
fn other_index(i: usize, n: usize, rng: &mut ChaCha8Rng) -> usize {
    let j = rng.gen_range(0..n - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

/// Matching-head pretraining of `f` on narration: each clip is paired with
/// its own text (positive), another clip's video and another clip's text
/// (negatives), under binary cross-entropy, plus MLM on the positive text.
pub fn matching_pretrain<T: Scalar>(
    model: &mut VqaT<T>,
    clips: &[NarrationClip],
    store: &dyn FeatureStore<T>,
    tokenizer: &dyn TokenizerPort,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome> {
    cfg.expect_phase(Phase::MatchingPretrain)?;
    let keep = select_fraction(clips.iter().map(|c| c.video_id.as_str()), cfg.data_fraction)?;
    let data: Vec<&NarrationClip> = clips
        .iter()
        .filter(|c| keep.contains(&c.video_id))
        .collect();
    if data.len() < 2 {
        return Err(Error::Empty(
            "matching pretraining needs at least two clips".into(),
        ));
    }
    let groups = group_by_video(data.iter().map(|c| c.video_id.as_str()));
    let steps_per_epoch = data.len().div_ceil(cfg.batch_clips.max(2));
    let total = total_steps(cfg, steps_per_epoch);
    let c = model.config().clone();
    let mut rng = rng_stream(cfg.seed, STREAM_BATCHES);
    let mut mlm_rng = rng_stream(cfg.seed, STREAM_MLM);
    let mut drop_rng = rng_stream(cfg.seed, STREAM_DROPOUT);
    let mut neg_rng = rng_stream(cfg.seed, STREAM_NEGATIVES);
    let mut adam = Adam::new(model.params().len());
    let mut outcome = TrainOutcome::default();
    for step in 0..total {
        let epoch = step / steps_per_epoch + 1;
        let picked = sample_batch(&groups, cfg, 2, &mut rng);
        let b = picked.len();
        let mut videos = Vec::with_capacity(b);
        let mut texts = Vec::with_capacity(b);
        for &i in &picked {
            let clip = data[i];
            videos.push(encode_clip(
                store,
                &clip.video_id,
                clip.start_s,
                clip.end_s,
                c.video_len,
            )?);
            texts.push(encode_text(&clip.text, tokenizer, c.question_len)?);
        }
        let mut g = Graph::new();
        let mut mode = Mode::Train(&mut drop_rng);
        let (mut pos, mut vneg, mut tneg) = (Vec::new(), Vec::new(), Vec::new());
        let mut states = Vec::new();
        let mut labels = Vec::new();
        for i in 0..b {
            let (ids, mask) = &texts[i];
            let (ids_c, lab) = if cfg.mlm {
                corrupt_for_mlm(ids, mask, tokenizer, &mut mlm_rng)
            } else {
                (ids.clone(), vec![crate::encode::IGNORE_LABEL; ids.len()])
            };
            let f = model.fuse(&mut g, &ids_c, mask, &videos[i].0, &videos[i].1, &mut mode)?;
            pos.push(model.match_logit(&mut g, f.embedding)?);
            states.push(f.question_states);
            labels.push(lab);

            let j = other_index(i, b, &mut neg_rng);
            let f = model.fuse(&mut g, ids, mask, &videos[j].0, &videos[j].1, &mut mode)?;
            vneg.push(model.match_logit(&mut g, f.embedding)?);

            let k = other_index(i, b, &mut neg_rng);
            let f = model.fuse(
                &mut g,
                &texts[k].0,
                &texts[k].1,
                &videos[i].0,
                &videos[i].1,
                &mut mode,
            )?;
            tneg.push(model.match_logit(&mut g, f.embedding)?);
        }
        let all: Vec<Var> = pos.into_iter().chain(vneg).chain(tneg).collect();
        let stacked = g.concat_rows(&all)?;
        let matching = matching_graph(&mut g, stacked)?;
        let mlm = if cfg.mlm {
            mlm_term(model, &mut g, &states, &labels)?
        } else {
            None
        };
        let (root, mlm_value) = combine(&mut g, matching, mlm, cfg)?;
        let loss = LossBundle::new(
            0.0,
            mlm_value,
            g.scalar(matching).as_f64(),
            if cfg.mlm { cfg.lambda_mlm } else { 0.0 },
        )?;
        let lr = lr_at(step, total, cfg.initial_lr)?;
        let grads = g.backward(root)?;
        adam.step(model.params_mut(), &grads, lr);
        observer.on_step(&record(step + 1, epoch, lr, &loss, true))?;
        outcome.losses.push(loss);
        outcome.steps = step + 1;
        if (step + 1) % steps_per_epoch == 0 || step + 1 == total {
            observer.on_epoch(epoch, model, None)?;
        }
    }
    Ok(outcome)
}
