//! Answer vocabularies, prediction, accuracy metrics and breakdown reports.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encode::{encode_clip, encode_text, encode_text_pair, FeatureStore, TokenizerPort};
use crate::error::{Error, Result};
use crate::model::VqaT;
use crate::objectives::MC_CANDIDATES;
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

/// Annotations per iVQA-style question.
pub const IVQA_ANNOTATIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabRule {
    TopK(usize),
    MinCount(usize),
    Explicit,
}

/// Ordered candidate answers for open-ended prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerVocabulary {
    answers: Vec<String>,
    rule: VocabRule,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl AnswerVocabulary {
    /// Keeps the given order; entries are trimmed and must be distinct.
    pub fn from_list(answers: Vec<String>) -> Result<Self> {
        Self::with_rule(
            answers.into_iter().map(|a| a.trim().to_string()).collect(),
            VocabRule::Explicit,
        )
    }

    fn with_rule(answers: Vec<String>, rule: VocabRule) -> Result<Self> {
        if answers.is_empty() {
            return Err(Error::Empty("answer vocabulary".into()));
        }
        let mut index = HashMap::with_capacity(answers.len());
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::validation(
                    "answer vocabulary",
                    format!("duplicate answer {a:?}"),
                ));
            }
        }
        Ok(Self {
            answers,
            rule,
            index,
        })
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn rule(&self) -> &VocabRule {
        &self.rule
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn get(&self, answer: &str) -> Option<usize> {
        self.index.get(answer.trim()).copied()
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Self::with_rule(self.answers, self.rule)
    }
}

/// Answer counts of a training split; keys are trimmed.
pub fn answer_counts<'a>(answers: impl IntoIterator<Item = &'a str>) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for a in answers {
        *counts.entry(a.trim().to_string()).or_insert(0) += 1;
    }
    counts
}

/// Vocabulary by descending count, ties in lexicographic order.
pub fn build_vocab<'a>(
    train_answers: impl IntoIterator<Item = &'a str>,
    rule: VocabRule,
) -> Result<AnswerVocabulary> {
    let counts = answer_counts(train_answers);
    if counts.is_empty() {
        return Err(Error::Empty("no training answers".into()));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let kept: Vec<String> = match &rule {
        VocabRule::TopK(k) => ranked.into_iter().take(*k).map(|(a, _)| a).collect(),
        VocabRule::MinCount(c) => ranked
            .into_iter()
            .filter(|(_, n)| n >= c)
            .map(|(a, _)| a)
            .collect(),
        VocabRule::Explicit => {
            return Err(Error::Precondition(
                "an explicit vocabulary is built with from_list".into(),
            ));
        }
    };
    AnswerVocabulary::with_rule(kept, rule)
}

/// Ground truth of a downstream sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GroundTruth {
    Open(String),
    Ivqa(Vec<String>),
    MultipleChoice {
        candidates: Vec<String>,
        correct: usize,
    },
}

impl GroundTruth {
    /// The single answer a sample trains on and is counted under.
    ///
    /// For iVQA this is the most frequent annotation, earliest on ties.
    pub fn primary(&self) -> &str {
        match self {
            GroundTruth::Open(a) => a.trim(),
            GroundTruth::Ivqa(all) => {
                let mut best = all[0].trim();
                let mut best_n = 0;
                for a in all {
                    let n = all.iter().filter(|b| b.trim() == a.trim()).count();
                    if n > best_n {
                        best = a.trim();
                        best_n = n;
                    }
                }
                best
            }
            GroundTruth::MultipleChoice {
                candidates,
                correct,
            } => candidates[*correct].trim(),
        }
    }

    pub fn is_multiple_choice(&self) -> bool {
        matches!(self, GroundTruth::MultipleChoice { .. })
    }
}

/// One downstream question.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    /// Position in the source file.
    pub id: usize,
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub question: String,
    pub ground_truth: GroundTruth,
    pub question_type: Option<String>,
    pub answer_train_frequency: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    video_id: String,
    start: f64,
    end: f64,
    question: String,
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    answers: Option<Vec<String>>,
    #[serde(default)]
    candidates: Option<Vec<String>>,
    #[serde(default)]
    correct: Option<usize>,
    #[serde(default, alias = "type")]
    question_type: Option<String>,
}

fn sample_from_raw(id: usize, raw: RawSample) -> std::result::Result<EvalSample, String> {
    let ground_truth = match (raw.answer, raw.answers, raw.candidates, raw.correct) {
        (Some(a), None, None, None) => GroundTruth::Open(a),
        (None, Some(all), None, None) => {
            if all.len() != IVQA_ANNOTATIONS {
                return Err(format!(
                    "expected {IVQA_ANNOTATIONS} answers, got {}",
                    all.len()
                ));
            }
            GroundTruth::Ivqa(all)
        }
        (None, None, Some(candidates), Some(correct)) => {
            if candidates.len() != MC_CANDIDATES {
                return Err(format!(
                    "expected {MC_CANDIDATES} candidates, got {}",
                    candidates.len()
                ));
            }
            if correct >= MC_CANDIDATES {
                return Err(format!(
                    "correct index {correct} outside 0..{MC_CANDIDATES}"
                ));
            }
            GroundTruth::MultipleChoice {
                candidates,
                correct,
            }
        }
        _ => {
            return Err(
                "exactly one of answer, answers or candidates+correct must be present".into(),
            )
        }
    };
    if !(raw.start.is_finite() && raw.end.is_finite()) || raw.start < 0.0 || raw.end < raw.start {
        return Err(format!("invalid clip range {}..{}", raw.start, raw.end));
    }
    if raw.question.trim().is_empty() {
        return Err("empty question".into());
    }
    Ok(EvalSample {
        id,
        video_id: raw.video_id,
        start_s: raw.start,
        end_s: raw.end,
        question: raw.question,
        ground_truth,
        question_type: raw.question_type,
        answer_train_frequency: None,
    })
}

/// Parses newline-delimited downstream records; blank lines are skipped.
pub fn parse_downstream(text: &str) -> Result<Vec<EvalSample>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: n + 1,
            message,
        };
        let raw: RawSample = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        out.push(sample_from_raw(out.len(), raw).map_err(parse_err)?);
    }
    Ok(out)
}

pub fn read_downstream(path: &Path) -> Result<Vec<EvalSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_downstream(&text)
}

/// Indices by descending score; equal scores keep index order.
pub fn rank_by_scores<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].as_f64().total_cmp(&scores[a].as_f64()));
    idx
}

/// Vocabulary indices ranked for one sample, given the precomputed `|V| × d` table.
pub fn zero_shot_predict<T: Scalar>(fused: &[T], vocab_table: &Matrix<T>) -> Result<Vec<usize>> {
    if fused.len() != vocab_table.cols() {
        return Err(Error::Shape(format!(
            "embedding of {} against a table of width {}",
            fused.len(),
            vocab_table.cols()
        )));
    }
    let scores: Vec<T> = (0..vocab_table.rows())
        .map(|k| dot(fused, vocab_table.row(k)))
        .collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("answer scores".into()));
    }
    Ok(rank_by_scores(&scores))
}

/// Fraction of samples whose answer index is among the first `k` predictions.
/// An absent ground truth (`None`) is a miss.
pub fn accuracy_topk(
    predictions: &[Vec<usize>],
    ground_truth: &[Option<usize>],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Precondition("k must be at least 1".into()));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("no samples to score".into()));
    }
    if predictions.len() != ground_truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} samples",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(ground_truth)
        .filter(|(p, gt)| gt.is_some_and(|g| p.iter().take(k).any(|&x| x == g)))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// `min(matches / 2, 1)` against five annotations.
pub fn ivqa_accuracy(prediction: &str, ground_truths: &[String]) -> Result<f64> {
    if ground_truths.len() != IVQA_ANNOTATIONS {
        return Err(Error::Precondition(format!(
            "expected {IVQA_ANNOTATIONS} annotations, got {}",
            ground_truths.len()
        )));
    }
    let p = prediction.trim();
    let matches = ground_truths.iter().filter(|g| g.trim() == p).count();
    Ok((matches as f64 / 2.0).min(1.0))
}

/// Best iVQA accuracy among the first `k` ranked answers.
pub fn ivqa_topk(ranked: &[&str], ground_truths: &[String], k: usize) -> Result<f64> {
    let mut best = 0.0f64;
    for a in ranked.iter().take(k) {
        best = best.max(ivqa_accuracy(a, ground_truths)?);
    }
    Ok(best)
}

/// Argmax over candidate scores; ties resolve to the lowest index.
pub fn multiple_choice_predict<T: Scalar>(scores: &[T]) -> Result<usize> {
    if scores.len() != MC_CANDIDATES {
        return Err(Error::Shape(format!(
            "{} candidate scores, expected {MC_CANDIDATES}",
            scores.len()
        )));
    }
    Ok(rank_by_scores(scores)[0])
}

/// Splits `(sample id, answer frequency)` pairs into four equal-count groups, most frequent first.
pub fn quartile_split(samples: &[(usize, usize)]) -> Result<[Vec<usize>; 4]> {
    if samples.is_empty() {
        return Err(Error::Empty("quartile split of no samples".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = sorted.len();
    let mut groups: [Vec<usize>; 4] = Default::default();
    let mut at = 0;
    for (g, group) in groups.iter_mut().enumerate() {
        let size = n / 4 + usize::from(g < n % 4);
        *group = sorted[at..at + size].iter().map(|s| s.0).collect();
        at += size;
    }
    Ok(groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QuestionType {
    What,
    Who,
    When,
    Where,
    Color,
    Number,
    Other,
}

impl QuestionType {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::What => "What",
            QuestionType::Who => "Who",
            QuestionType::When => "When",
            QuestionType::Where => "Where",
            QuestionType::Color => "Color",
            QuestionType::Number => "Number",
            QuestionType::Other => "Other",
        }
    }
}

/// Type from the leading interrogative words.
pub fn question_type(question: &str) -> QuestionType {
    let words: Vec<String> = question
        .split_whitespace()
        .take(2)
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .collect();
    let first = words.first().map(String::as_str).unwrap_or("");
    let second = words.get(1).map(String::as_str).unwrap_or("");
    match (first, second) {
        ("what", "color" | "colour") => QuestionType::Color,
        ("how", "many" | "much") => QuestionType::Number,
        ("what", _) => QuestionType::What,
        ("who", _) => QuestionType::Who,
        ("when", _) => QuestionType::When,
        ("where", _) => QuestionType::Where,
        _ => QuestionType::Other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub accuracy: f64,
    pub count: usize,
}

/// Mean per-sample score for each type; absent types are omitted.
pub fn question_type_report(types: &[String], scores: &[f64]) -> BTreeMap<String, TypeAccuracy> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (t, &s) in types.iter().zip(scores) {
        let e = sums.entry(t.clone()).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(t, (s, n))| {
            (
                t,
                TypeAccuracy {
                    accuracy: s / n as f64,
                    count: n,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeSource {
    Metadata,
    Heuristic,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quartile_top1: Option<[f64; 4]>,
    pub per_type: BTreeMap<String, TypeAccuracy>,
    pub type_source: TypeSource,
    pub n_samples: usize,
    pub oov_rate: f64,
}

/// Per-sample outcome kept next to the report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplePrediction {
    pub id: usize,
    pub video_id: String,
    pub question: String,
    /// Top-ranked answers (at most ten), or the chosen candidate.
    pub predicted: Vec<String>,
    pub expected: String,
    pub top1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top10: Option<f64>,
    pub question_type: String,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Training answer counts; enables the frequency-quartile breakdown.
    pub train_counts: Option<HashMap<String, usize>>,
    /// Rank multiple-choice candidates with the matching head instead of `f·g`.
    pub use_matching_head: bool,
}

/// Inputs of `f` for one sample.
pub struct EncodedQuestion<T> {
    pub video: Matrix<T>,
    pub video_mask: Vec<bool>,
    pub question_ids: Vec<u32>,
    pub question_mask: Vec<bool>,
}

pub fn encode_question<T: Scalar>(
    model: &VqaT<T>,
    sample: &EvalSample,
    store: &dyn FeatureStore<T>,
    tokenizer: &dyn TokenizerPort,
) -> Result<EncodedQuestion<T>> {
    let c = model.config();
    let (video, video_mask) = encode_clip(
        store,
        &sample.video_id,
        sample.start_s,
        sample.end_s,
        c.video_len,
    )?;
    let (question_ids, question_mask) = encode_text(&sample.question, tokenizer, c.question_len)?;
    Ok(EncodedQuestion {
        video,
        video_mask,
        question_ids,
        question_mask,
    })
}

/// `K × d` answer embeddings of a list of strings.
pub fn answer_table<T: Scalar>(
    model: &VqaT<T>,
    answers: &[String],
    tokenizer: &dyn TokenizerPort,
) -> Result<Matrix<T>> {
    let m = model.config().answer_len;
    let (ids, masks): (Vec<_>, Vec<_>) = answers
        .iter()
        .map(|a| encode_text(a, tokenizer, m))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    model.answer_table(&ids, &masks)
}

/// Candidate scores of one multiple-choice sample.
pub fn multiple_choice_scores<T: Scalar>(
    model: &VqaT<T>,
    sample: &EvalSample,
    enc: &EncodedQuestion<T>,
    tokenizer: &dyn TokenizerPort,
    use_matching_head: bool,
) -> Result<Vec<T>> {
    let GroundTruth::MultipleChoice { candidates, .. } = &sample.ground_truth else {
        return Err(Error::Precondition("sample is not multiple-choice".into()));
    };
    if use_matching_head {
        let l = model.config().question_len;
        candidates
            .iter()
            .map(|cand| {
                let (ids, mask) = encode_text_pair(&sample.question, cand, tokenizer, l)?;
                model.match_score(&enc.video, &enc.video_mask, &ids, &mask)
            })
            .collect()
    } else {
        let f = model.encode_video_question(
            &enc.video,
            &enc.video_mask,
            &enc.question_ids,
            &enc.question_mask,
        )?;
        let table = answer_table(model, candidates, tokenizer)?;
        Ok((0..table.rows()).map(|k| dot(&f, table.row(k))).collect())
    }
}

fn type_of(sample: &EvalSample) -> (String, bool) {
    match &sample.question_type {
        Some(t) => (t.clone(), true),
        None => (question_type(&sample.question).as_str().to_string(), false),
    }
}

/// Scores a whole downstream set.
///
/// Open-ended and iVQA samples are ranked against `vocab` (required for
/// them); multiple-choice samples are ranked among their own candidates.
pub fn evaluate_samples<T: Scalar>(
    model: &VqaT<T>,
    samples: &[EvalSample],
    vocab: Option<&AnswerVocabulary>,
    store: &dyn FeatureStore<T>,
    tokenizer: &dyn TokenizerPort,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<SamplePrediction>)> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let needs_vocab = samples.iter().any(|s| !s.ground_truth.is_multiple_choice());
    let table = match (needs_vocab, vocab) {
        (false, _) => None,
        (true, Some(v)) => Some(answer_table(model, v.answers(), tokenizer)?),
        (true, None) => {
            return Err(Error::Precondition(
                "open-ended samples need an answer vocabulary".into(),
            ))
        }
    };
    let mut preds = Vec::with_capacity(samples.len());
    let mut oov = 0usize;
    let mut any_top10 = false;
    let (mut from_meta, mut from_rule) = (false, false);
    for s in samples {
        let enc = encode_question(model, s, store, tokenizer)?;
        let (qtype, meta) = type_of(s);
        from_meta |= meta;
        from_rule |= !meta;
        let (predicted, top1, top10) = match &s.ground_truth {
            GroundTruth::MultipleChoice {
                candidates,
                correct,
            } => {
                let scores =
                    multiple_choice_scores(model, s, &enc, tokenizer, opts.use_matching_head)?;
                let choice = multiple_choice_predict(&scores)?;
                (
                    vec![candidates[choice].clone()],
                    if choice == *correct { 1.0 } else { 0.0 },
                    None,
                )
            }
            gt => {
                let (vocab, table) = (
                    vocab.expect("checked above"),
                    table.as_ref().expect("checked above"),
                );
                let f = model.encode_video_question(
                    &enc.video,
                    &enc.video_mask,
                    &enc.question_ids,
                    &enc.question_mask,
                )?;
                let ranked = zero_shot_predict(&f, table)?;
                let names: Vec<&str> = ranked
                    .iter()
                    .take(10)
                    .map(|&k| vocab.answers()[k].as_str())
                    .collect();
                any_top10 = true;
                let (t1, t10) = match gt {
                    GroundTruth::Open(a) => {
                        let truth = vocab.get(a);
                        if truth.is_none() {
                            oov += 1;
                        }
                        let r = [ranked];
                        (
                            accuracy_topk(&r, &[truth], 1)?,
                            accuracy_topk(&r, &[truth], 10)?,
                        )
                    }
                    GroundTruth::Ivqa(all) => {
                        if all.iter().all(|a| vocab.get(a).is_none()) {
                            oov += 1;
                        }
                        (ivqa_topk(&names, all, 1)?, ivqa_topk(&names, all, 10)?)
                    }
                    GroundTruth::MultipleChoice { .. } => unreachable!(),
                };
                (names.iter().map(|n| n.to_string()).collect(), t1, Some(t10))
            }
        };
        preds.push(SamplePrediction {
            id: s.id,
            video_id: s.video_id.clone(),
            question: s.question.clone(),
            predicted,
            expected: s.ground_truth.primary().to_string(),
            top1,
            top10,
            question_type: qtype,
        });
    }
    let n = preds.len() as f64;
    let top1 = preds.iter().map(|p| p.top1).sum::<f64>() / n;
    let top10 = any_top10.then(|| preds.iter().map(|p| p.top10.unwrap_or(p.top1)).sum::<f64>() / n);

    let quartile_top1 = match &opts.train_counts {
        Some(counts) => {
            let freq: Vec<(usize, usize)> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    (
                        i,
                        s.answer_train_frequency
                            .unwrap_or_else(|| *counts.get(s.ground_truth.primary()).unwrap_or(&0)),
                    )
                })
                .collect();
            let groups = quartile_split(&freq)?;
            let mut q = [0.0; 4];
            for (g, idx) in groups.iter().enumerate() {
                q[g] = if idx.is_empty() {
                    0.0
                } else {
                    idx.iter().map(|&i| preds[i].top1).sum::<f64>() / idx.len() as f64
                };
            }
            Some(q)
        }
        None => None,
    };
    let types: Vec<String> = preds.iter().map(|p| p.question_type.clone()).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.top1).collect();
    let report = EvalReport {
        top1,
        top10,
        quartile_top1,
        per_type: question_type_report(&types, &scores),
        type_source: match (from_meta, from_rule) {
            (true, false) => TypeSource::Metadata,
            (false, _) => TypeSource::Heuristic,
            (true, true) => TypeSource::Mixed,
        },
        n_samples: preds.len(),
        oov_rate: oov as f64 / n,
    };
    Ok((report, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn multiset(counts: &[(&str, usize)]) -> Vec<String> {
        counts
            .iter()
            .flat_map(|&(a, n)| std::iter::repeat_n(a.to_string(), n))
            .collect()
    }

    #[test]
    fn vocab_rules() {
        let m = multiset(&[("a", 3), ("b", 1), ("c", 2)]);
        let v = build_vocab(m.iter().map(String::as_str), VocabRule::MinCount(2)).unwrap();
        assert_eq!(v.answers(), s(&["a", "c"]).as_slice());
        let v = build_vocab(m.iter().map(String::as_str), VocabRule::TopK(2)).unwrap();
        assert_eq!(v.answers(), s(&["a", "c"]).as_slice());
        let m = multiset(&[("c", 2), ("b", 2), ("a", 2)]);
        let v = build_vocab(m.iter().map(String::as_str), VocabRule::TopK(2)).unwrap();
        assert_eq!(v.answers(), s(&["a", "b"]).as_slice());
        assert!(build_vocab(m.iter().map(String::as_str), VocabRule::MinCount(3)).is_err());
        assert!(build_vocab(std::iter::empty(), VocabRule::TopK(3)).is_err());
        assert_eq!(v.get(" b "), Some(1));
        assert!(AnswerVocabulary::from_list(s(&["x", "x "])).is_err());
    }

    #[test]
    fn vocab_serde_roundtrip() {
        let v = AnswerVocabulary::from_list(s(&["x", "y"])).unwrap();
        let back: AnswerVocabulary =
            serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        let back = back.reindex().unwrap();
        assert_eq!(back, v);
        assert_eq!(back.get("y"), Some(1));
    }

    #[test]
    fn hand_set_ranking_matches_brute_force() {
        let table = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.7, 0.7]]).unwrap();
        let f = [0.2, 0.9];
        let ranked = zero_shot_predict(&f, &table).unwrap();
        let mut oracle: Vec<(f64, usize)> = (0..3)
            .map(|k| (f[0] * table.get(k, 0) + f[1] * table.get(k, 1), k))
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(ranked, oracle.iter().map(|o| o.1).collect::<Vec<_>>());
        assert_eq!(ranked, vec![1, 2, 0]);
    }

    #[test]
    fn equal_scores_keep_vocab_order() {
        assert_eq!(rank_by_scores(&[0.5, 0.5, 0.5]), vec![0, 1, 2]);
        assert_eq!(multiple_choice_predict(&[1.0, 1.0, 1.0, 1.0]).unwrap(), 0);
        assert_eq!(multiple_choice_predict(&[0.0, 0.1, 3.0, 1.0]).unwrap(), 2);
    }

    #[test]
    fn accuracy_cases() {
        let preds = vec![vec![0, 1, 2], vec![2, 1, 0]];
        assert_eq!(accuracy_topk(&preds, &[Some(0), Some(0)], 1).unwrap(), 0.5);
        assert_eq!(accuracy_topk(&preds, &[None, None], 3).unwrap(), 0.0);
        assert_eq!(accuracy_topk(&preds, &[Some(1), Some(0)], 3).unwrap(), 1.0);
        assert!(accuracy_topk(&preds, &[Some(1), Some(0)], 0).is_err());
        assert!(accuracy_topk(&[], &[], 1).is_err());
        // Small vocabularies always hit at ten.
        assert_eq!(accuracy_topk(&preds, &[Some(2), Some(2)], 10).unwrap(), 1.0);
    }

    #[test]
    fn ivqa_cases() {
        let gts = s(&["rose", "rose", "rose", "rose", "rose flower"]);
        assert_eq!(ivqa_accuracy("rose", &gts).unwrap(), 1.0);
        assert_eq!(ivqa_accuracy(" rose flower", &gts).unwrap(), 0.5);
        assert_eq!(ivqa_accuracy("tulip", &gts).unwrap(), 0.0);
        assert!(ivqa_accuracy("rose", &gts[..4]).is_err());
        assert_eq!(
            ivqa_topk(&["tulip", "rose flower", "rose"], &gts, 2).unwrap(),
            0.5
        );
        assert_eq!(GroundTruth::Ivqa(gts).primary(), "rose");
    }

    #[test]
    fn random_multiple_choice_is_a_quarter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let mut hits = 0;
        for _ in 0..n {
            let scores: Vec<f64> = (0..4).map(|_| rng.gen()).collect();
            let correct = rng.gen_range(0..4);
            hits += usize::from(multiple_choice_predict(&scores).unwrap() == correct);
        }
        let acc = hits as f64 / n as f64;
        assert!((acc - 0.25).abs() <= 0.02, "{acc}");
    }

    /// Sort-then-chunk oracle with explicit group sizes.
    fn quartile_oracle(freqs: &[usize]) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..freqs.len()).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(freqs[i]), i));
        let n = freqs.len();
        let sizes: Vec<usize> = (0..4).map(|g| (n + 3 - g) / 4).collect();
        let mut out = Vec::new();
        let mut it = order.into_iter();
        for size in sizes {
            out.push(it.by_ref().take(size).collect());
        }
        out
    }

    #[test]
    fn quartile_examples() {
        let freqs = [9, 9, 7, 5, 5, 3, 2, 1];
        let input: Vec<(usize, usize)> = freqs.iter().copied().enumerate().collect();
        let g = quartile_split(&input).unwrap();
        assert_eq!(g, [vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]);
        let input: Vec<(usize, usize)> = (0..5).map(|i| (i, 3)).collect();
        let g = quartile_split(&input).unwrap();
        assert_eq!(g.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 1, 1, 1]);
        assert_eq!(g, [vec![0, 1], vec![2], vec![3], vec![4]]);
        assert!(quartile_split(&[]).is_err());
    }

    #[test]
    fn question_types() {
        assert_eq!(question_type("what color is the car?"), QuestionType::Color);
        assert_eq!(
            question_type("how many emails have I had?"),
            QuestionType::Number
        );
        assert_eq!(question_type("How much sugar?"), QuestionType::Number);
        assert_eq!(question_type("is this good?"), QuestionType::Other);
        assert_eq!(question_type("What is cut?"), QuestionType::What);
        assert_eq!(question_type("who plays"), QuestionType::Who);
        assert_eq!(question_type("when"), QuestionType::When);
        assert_eq!(question_type("where is it"), QuestionType::Where);
        assert_eq!(question_type("how do you"), QuestionType::Other);
        let report = question_type_report(&s(&["What", "What", "Who"]), &[1.0, 0.0, 1.0]);
        assert_eq!(report.len(), 2);
        assert_eq!(
            report["What"],
            TypeAccuracy {
                accuracy: 0.5,
                count: 2
            }
        );
    }

    #[test]
    fn downstream_formats() {
        let text = r#"{"video_id":"v","start":0,"end":2,"question":"what?","answer":"dog"}

{"video_id":"v","start":0,"end":2,"question":"what?","answers":["a","a","b","c","d"]}
{"video_id":"v","start":1,"end":2,"question":"which?","candidates":["a","b","c","d"],"correct":2,"type":"Other"}"#;
        let samples = parse_downstream(text).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].ground_truth, GroundTruth::Open("dog".into()));
        assert!(matches!(samples[1].ground_truth, GroundTruth::Ivqa(_)));
        assert_eq!(samples[2].ground_truth.primary(), "c");
        assert_eq!(samples[2].question_type.as_deref(), Some("Other"));
        assert_eq!(samples[2].id, 2);

        let bad = [
            r#"{"video_id":"v","start":0,"end":2,"question":"q","answer":"a","answers":["a","a","a","a","a"]}"#,
            r#"{"video_id":"v","start":0,"end":2,"question":"q","answers":["a"]}"#,
            r#"{"video_id":"v","start":0,"end":2,"question":"q","candidates":["a","b","c","d"],"correct":4}"#,
            r#"{"video_id":"v","start":3,"end":2,"question":"q","answer":"a"}"#,
            r#"{"video_id":"v","start":0,"end":2,"question":"q"}"#,
        ];
        for (i, line) in bad.iter().enumerate() {
            let text = format!(
                "{}\n{line}",
                r#"{"video_id":"v","start":0,"end":2,"question":"q","answer":"a"}"#
            );
            match parse_downstream(&text) {
                Err(Error::Parse { line: 2, .. }) => {}
                other => panic!("case {i}: {other:?}"),
            }
        }
    }

    proptest! {
        #[test]
        fn quartiles_partition_and_order(freqs in proptest::collection::vec(0usize..20, 1..40)) {
            let input: Vec<(usize, usize)> = freqs.iter().copied().enumerate().collect();
            let groups = quartile_split(&input).unwrap();
            prop_assert_eq!(groups.to_vec(), quartile_oracle(&freqs));
            let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut all: Vec<usize> = groups.iter().flatten().copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..freqs.len()).collect::<Vec<_>>());
            if !groups[0].is_empty() && !groups[3].is_empty() {
                let q1_min = groups[0].iter().map(|&i| freqs[i]).min().unwrap();
                let q4_max = groups[3].iter().map(|&i| freqs[i]).max().unwrap();
                prop_assert!(q1_min >= q4_max);
            }
        }

        #[test]
        fn ranking_is_affine_invariant(scores in proptest::collection::vec(-5.0f64..5.0, 1..12), a in 0.1f64..10.0, b in -3.0f64..3.0) {
            let scaled: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            // Rescaling may create ties only through rounding; compare on distinct inputs.
            let mut sorted = scores.clone();
            sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-9));
            prop_assert_eq!(rank_by_scores(&scores), rank_by_scores(&scaled));
        }

        #[test]
        fn topk_is_monotone(n in 1usize..10, k in 1usize..8, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds: Vec<Vec<usize>> = (0..n).map(|_| { let mut p: Vec<usize> = (0..8).collect(); p.shuffle(&mut rng); p }).collect();
            let gt: Vec<Option<usize>> = (0..n).map(|_| if rng.gen_bool(0.2) { None } else { Some(rng.gen_range(0..8)) }).collect();
            prop_assert!(accuracy_topk(&preds, &gt, k).unwrap() <= accuracy_topk(&preds, &gt, k + 1).unwrap());
        }

        #[test]
        fn ivqa_is_monotone_in_matches(matches in 0usize..=5) {
            let gts: Vec<String> = (0..5).map(|i| if i < matches { "x".to_string() } else { format!("o{i}") }).collect();
            let acc = ivqa_accuracy("x", &gts).unwrap();
            prop_assert!([0.0, 0.5, 1.0].contains(&acc));
            prop_assert_eq!(acc, (matches as f64 / 2.0).min(1.0));
        }
    }
}
