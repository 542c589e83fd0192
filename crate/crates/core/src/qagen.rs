//! Question-answer generation from narration.
//!
//! Narration is punctuated into sentences, every sentence is aligned to the
//! clip spanned by its source segments, answers are extracted from the
//! sentence and one question is generated per answer. The three text models
//! sit behind ports; deterministic rule-based stubs ship for tests and
//! desk-scale runs.

use serde::{Deserialize, Serialize};

use crate::corpus::{dedup_adjacent_repetitions, NarratedVideo, VqaTriplet};
use crate::error::{Error, Result};

/// Sentence segmentation of unpunctuated ASR words.
pub trait PunctuatorPort: Send + Sync {
    /// Returns the index after each sentence's last word.
    fn punctuate(&self, words: &[&str]) -> Vec<usize>;
}

/// Answer span extraction.
pub trait AnswerExtractorPort: Send + Sync {
    /// Candidate answers, each a contiguous substring of `sentence`.
    fn extract(&self, sentence: &str) -> Vec<String>;
}

/// Answer-conditioned question generation. Model-backed adapters decode with
/// a beam of 4 and return the top beam.
pub trait QuestionGeneratorPort: Send + Sync {
    fn generate(&self, answer: &str, sentence: &str) -> String;
}

/// The three ports used by [`generate_triplets`].
pub struct GenerationPorts<'a> {
    pub punctuator: &'a dyn PunctuatorPort,
    pub extractor: &'a dyn AnswerExtractorPort,
    pub generator: &'a dyn QuestionGeneratorPort,
}

impl GenerationPorts<'static> {
    /// The rule-based reference stubs.
    pub fn stubs() -> Self {
        GenerationPorts {
            punctuator: &StubPunctuator,
            extractor: &StubAnswerExtractor,
            generator: &StubQuestionGenerator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub max_sentence_tokens: usize,
    pub max_answers_per_sentence: usize,
    pub min_clip_duration_s: Option<f64>,
    pub max_clip_duration_s: Option<f64>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_sentence_tokens: 32,
            max_answers_per_sentence: 2,
            min_clip_duration_s: None,
            max_clip_duration_s: None,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_sentence_tokens == 0 || self.max_answers_per_sentence == 0 {
            return Err(Error::validation(
                "generation config",
                "counts must be positive",
            ));
        }
        for d in [self.min_clip_duration_s, self.max_clip_duration_s]
            .into_iter()
            .flatten()
        {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::validation(
                    "generation config",
                    "clip duration clamps must be positive",
                ));
            }
        }
        Ok(())
    }
}

/// A punctuated sentence aligned to a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceSpan {
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
    /// Inclusive `(first, last)` indices into the video's flattened word list.
    pub source_word_range: (usize, usize),
}

/// Splits a video's narration into sentences with segment-granularity timing.
///
/// Sentences whose source segments have zero total duration are dropped, since
/// they cannot be aligned to a clip.
pub fn punctuate_and_split(
    video: &NarratedVideo,
    punctuator: &dyn PunctuatorPort,
) -> Result<Vec<SentenceSpan>> {
    let mut words = Vec::new();
    let mut owner = Vec::new();
    for (seg_idx, seg) in video.segments.iter().enumerate() {
        for w in seg.words() {
            words.push(w);
            owner.push(seg_idx);
        }
    }
    let boundaries = punctuator.punctuate(&words);
    check_boundaries(&boundaries, words.len())
        .map_err(|m| Error::Contract(format!("punctuator on video `{}`: {m}", video.video_id)))?;

    let mut spans = Vec::with_capacity(boundaries.len());
    let mut begin = 0;
    for &end in &boundaries {
        let first = &video.segments[owner[begin]];
        let last = &video.segments[owner[end - 1]];
        if last.end_s > first.start_s {
            spans.push(SentenceSpan {
                text: words[begin..end].join(" "),
                start_s: first.start_s,
                end_s: last.end_s,
                source_word_range: (begin, end - 1),
            });
        }
        begin = end;
    }
    Ok(spans)
}

fn check_boundaries(boundaries: &[usize], word_count: usize) -> std::result::Result<(), String> {
    if word_count == 0 {
        return if boundaries.is_empty() {
            Ok(())
        } else {
            Err("boundaries for an empty word list".into())
        };
    }
    let mut prev = 0;
    for &b in boundaries {
        if b <= prev {
            return Err(format!("boundaries not strictly increasing at {b}"));
        }
        prev = b;
    }
    if prev != word_count {
        return Err(format!(
            "last boundary {prev} does not equal word count {word_count}"
        ));
    }
    Ok(())
}

/// Reference punctuator: a sentence ends after a word ending in `.`, `?` or `!`,
/// or after 16 words without a terminator.
#[derive(Debug, Default, Clone, Copy)]
pub struct StubPunctuator;

const STUB_MAX_SENTENCE_WORDS: usize = 16;

impl PunctuatorPort for StubPunctuator {
    fn punctuate(&self, words: &[&str]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut since = 0;
        for (i, w) in words.iter().enumerate() {
            since += 1;
            if w.ends_with(['.', '?', '!']) || since == STUB_MAX_SENTENCE_WORDS {
                out.push(i + 1);
                since = 0;
            }
        }
        if out.last() != Some(&words.len()) && !words.is_empty() {
            out.push(words.len());
        }
        out
    }
}

/// First `max_tokens` whitespace words of `sentence`, single-space joined.
pub fn truncate_words(sentence: &str, max_tokens: usize) -> String {
    sentence
        .split_whitespace()
        .take(max_tokens)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Runs the extractor on the truncated sentence and validates its output.
pub fn extract_answers(
    sentence: &str,
    extractor: &dyn AnswerExtractorPort,
    cfg: &GenerationConfig,
) -> Result<Vec<String>> {
    if sentence.trim().is_empty() {
        return Err(Error::Precondition(
            "answer extraction needs a non-empty sentence".into(),
        ));
    }
    let truncated = truncate_words(sentence, cfg.max_sentence_tokens);
    let mut answers: Vec<String> = Vec::new();
    for answer in extractor.extract(&truncated) {
        if answer.trim().is_empty() {
            return Err(Error::Contract("extractor returned an empty answer".into()));
        }
        if !truncated.contains(answer.as_str()) {
            return Err(Error::Contract(format!(
                "answer `{answer}` is not a substring of `{truncated}`"
            )));
        }
        if !answers.contains(&answer) {
            answers.push(answer);
        }
    }
    answers.truncate(cfg.max_answers_per_sentence);
    Ok(answers)
}

fn is_edge_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

/// Reference extractor: the final two words of the sentence as a single answer,
/// with punctuation trimmed from the ends of the span.
#[derive(Debug, Default, Clone, Copy)]
pub struct StubAnswerExtractor;

impl AnswerExtractorPort for StubAnswerExtractor {
    fn extract(&self, sentence: &str) -> Vec<String> {
        let starts: Vec<usize> = word_starts(sentence);
        if starts.len() < 2 {
            return Vec::new();
        }
        let span = sentence[starts[starts.len() - 2]..]
            .trim()
            .trim_matches(is_edge_punct)
            .trim();
        if span.is_empty() {
            Vec::new()
        } else {
            vec![span.to_owned()]
        }
    }
}

fn word_starts(text: &str) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_word = false;
        } else if !in_word {
            starts.push(i);
            in_word = true;
        }
    }
    starts
}

/// Reference generator: cloze question replacing the answer span with "what".
#[derive(Debug, Default, Clone, Copy)]
pub struct StubQuestionGenerator;

impl QuestionGeneratorPort for StubQuestionGenerator {
    fn generate(&self, answer: &str, sentence: &str) -> String {
        let cloze = match sentence.rfind(answer) {
            Some(pos) => format!(
                "{}what{}",
                &sentence[..pos],
                &sentence[pos + answer.len()..]
            ),
            None => format!("{sentence} what"),
        };
        format!(
            "{}?",
            cloze
                .trim_end()
                .trim_end_matches(['.', '!', '?', ',', ';', ':'])
                .trim_end()
        )
    }
}

/// Generates one question for `answer` and validates it.
pub fn generate_question(
    answer: &str,
    sentence: &str,
    generator: &dyn QuestionGeneratorPort,
) -> Result<String> {
    if answer.trim().is_empty() {
        return Err(Error::Precondition(
            "question generation needs a non-empty answer".into(),
        ));
    }
    if sentence.trim().is_empty() {
        return Err(Error::Precondition(
            "question generation needs a non-empty sentence".into(),
        ));
    }
    let question = generator.generate(answer, sentence);
    let trimmed = question.trim();
    if trimmed.is_empty() {
        return Err(Error::Contract(
            "generator returned an empty question".into(),
        ));
    }
    if !trimmed.ends_with('?') {
        return Err(Error::Contract(format!(
            "generated question `{trimmed}` does not end in '?'"
        )));
    }
    Ok(trimmed.to_owned())
}

fn clamp_clip(start: f64, end: f64, bounds: (f64, f64), cfg: &GenerationConfig) -> (f64, f64) {
    let (mut start, mut end) = (start, end);
    if let Some(max) = cfg.max_clip_duration_s {
        if end - start > max {
            end = start + max;
        }
    }
    if let Some(min) = cfg.min_clip_duration_s {
        if end - start < min {
            end = (start + min).min(bounds.1);
            start = (end - min).max(bounds.0);
        }
    }
    (start, end)
}

/// The full generation pipeline for one video.
pub fn generate_triplets(
    video: &NarratedVideo,
    ports: &GenerationPorts<'_>,
    cfg: &GenerationConfig,
) -> Result<Vec<VqaTriplet>> {
    cfg.validate()?;
    video.validate()?;
    let cleaned = dedup_adjacent_repetitions(video);
    let Some(bounds) = cleaned.time_bounds() else {
        return Ok(Vec::new());
    };
    let context = |idx: usize, e: Error| match e {
        Error::Contract(m) => {
            Error::Contract(format!("video `{}` sentence {idx}: {m}", video.video_id))
        }
        Error::Precondition(m) => {
            Error::Precondition(format!("video `{}` sentence {idx}: {m}", video.video_id))
        }
        other => other,
    };

    let mut triplets = Vec::new();
    for (idx, span) in punctuate_and_split(&cleaned, ports.punctuator)?
        .into_iter()
        .enumerate()
    {
        let sentence = truncate_words(&span.text, cfg.max_sentence_tokens);
        let answers =
            extract_answers(&span.text, ports.extractor, cfg).map_err(|e| context(idx, e))?;
        let (start_s, end_s) = clamp_clip(span.start_s, span.end_s, bounds, cfg);
        for answer in answers {
            let question = generate_question(&answer, &sentence, ports.generator)
                .map_err(|e| context(idx, e))?;
            triplets.push(VqaTriplet {
                video_id: video.video_id.clone(),
                start_s,
                end_s,
                question,
                answer,
            });
        }
    }
    Ok(triplets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TranscriptSegment;

    fn video(segments: &[(f64, f64, &str)]) -> NarratedVideo {
        NarratedVideo::new(
            "v",
            segments
                .iter()
                .map(|&(s, e, t)| TranscriptSegment::new(s, e, t))
                .collect(),
        )
    }

    struct FixedBoundaries(Vec<usize>);
    impl PunctuatorPort for FixedBoundaries {
        fn punctuate(&self, _: &[&str]) -> Vec<usize> {
            self.0.clone()
        }
    }

    #[test]
    fn split_aligns_to_segments() {
        let v = video(&[
            (0.0, 3.0, "fold them in half again"),
            (3.0, 6.0, "to make a triangle"),
        ]);
        let spans = punctuate_and_split(&v, &FixedBoundaries(vec![9])).unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].start_s, spans[0].end_s), (0.0, 6.0));
        assert_eq!(spans[0].source_word_range, (0, 8));

        let one = video(&[(1.0, 4.0, "hello there friend")]);
        let spans = punctuate_and_split(&one, &FixedBoundaries(vec![3])).unwrap();
        assert_eq!((spans[0].start_s, spans[0].end_s), (1.0, 4.0));

        let three = video(&[(0.0, 2.0, "a b"), (2.0, 5.0, "c d"), (5.0, 9.0, "e f")]);
        let spans = punctuate_and_split(&three, &FixedBoundaries(vec![2, 4, 6])).unwrap();
        assert_eq!((spans[1].start_s, spans[1].end_s), (2.0, 5.0));
        assert_eq!(spans[1].source_word_range, (2, 3));
    }

    #[test]
    fn split_rejects_bad_boundaries() {
        let v = video(&[(0.0, 3.0, "a b c")]);
        for bad in [vec![2], vec![2, 2, 3], vec![0, 3], vec![4]] {
            assert!(matches!(
                punctuate_and_split(&v, &FixedBoundaries(bad)),
                Err(Error::Contract(_))
            ));
        }
    }

    #[test]
    fn stub_punctuator_rules() {
        assert_eq!(StubPunctuator.punctuate(&["hi.", "ok"]), vec![1, 2]);
        let twenty = vec!["w"; 20];
        assert_eq!(StubPunctuator.punctuate(&twenty), vec![16, 20]);
        assert!(StubPunctuator.punctuate(&[]).is_empty());
        assert_eq!(StubPunctuator.punctuate(&["a", "b?"]), vec![2]);
    }

    #[test]
    fn stub_extraction() {
        let cfg = GenerationConfig::default();
        let got = extract_answers(
            "the sound is amazing on this piano",
            &StubAnswerExtractor,
            &cfg,
        )
        .unwrap();
        assert_eq!(got, ["this piano"]);
        assert!(extract_answers("hello", &StubAnswerExtractor, &cfg)
            .unwrap()
            .is_empty());
        let got =
            extract_answers("fold it, to make a triangle.", &StubAnswerExtractor, &cfg).unwrap();
        assert_eq!(got, ["a triangle"]);
    }

    #[test]
    fn extraction_truncates_before_extracting() {
        let long: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let cfg = GenerationConfig::default();
        let got = extract_answers(&long.join(" "), &StubAnswerExtractor, &cfg).unwrap();
        assert_eq!(got, ["w30 w31"]);
    }

    struct Bad(Vec<String>);
    impl AnswerExtractorPort for Bad {
        fn extract(&self, _: &str) -> Vec<String> {
            self.0.clone()
        }
    }

    #[test]
    fn extraction_contract() {
        let cfg = GenerationConfig {
            max_answers_per_sentence: 2,
            ..Default::default()
        };
        let err = extract_answers("a b c", &Bad(vec!["zz".into()]), &cfg);
        assert!(matches!(err, Err(Error::Contract(_))));
        let got = extract_answers(
            "a b c",
            &Bad(vec!["a".into(), "a".into(), "b".into(), "c".into()]),
            &cfg,
        )
        .unwrap();
        assert_eq!(got, ["a", "b"]);
        assert!(matches!(
            extract_answers("  ", &Bad(vec![]), &cfg),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn stub_question() {
        let q = generate_question(
            "this piano",
            "the sound is amazing on this piano",
            &StubQuestionGenerator,
        )
        .unwrap();
        assert_eq!(q, "the sound is amazing on what?");
        let q =
            generate_question("a triangle", "to make a triangle.", &StubQuestionGenerator).unwrap();
        assert_eq!(q, "to make what?");
        assert!(matches!(
            generate_question("", "x y", &StubQuestionGenerator),
            Err(Error::Precondition(_))
        ));
    }

    struct Silent;
    impl QuestionGeneratorPort for Silent {
        fn generate(&self, _: &str, _: &str) -> String {
            String::new()
        }
    }

    #[test]
    fn empty_question_is_contract_violation() {
        assert!(matches!(
            generate_question("a", "a b", &Silent),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn two_sentence_video() {
        let v = video(&[
            (0.0, 4.0, "first pour the milk."),
            (4.0, 7.0, "then stir it"),
            (7.0, 10.0, "slowly with a spoon."),
        ]);
        let got =
            generate_triplets(&v, &GenerationPorts::stubs(), &GenerationConfig::default()).unwrap();
        let expected = vec![
            VqaTriplet {
                video_id: "v".into(),
                start_s: 0.0,
                end_s: 4.0,
                question: "first pour what?".into(),
                answer: "the milk".into(),
            },
            VqaTriplet {
                video_id: "v".into(),
                start_s: 4.0,
                end_s: 10.0,
                question: "then stir it slowly with what?".into(),
                answer: "a spoon".into(),
            },
        ];
        assert_eq!(got, expected);
    }

    #[test]
    fn empty_and_one_word_sentences() {
        let empty = video(&[]);
        assert!(generate_triplets(
            &empty,
            &GenerationPorts::stubs(),
            &GenerationConfig::default()
        )
        .unwrap()
        .is_empty());
        let v = video(&[(0.0, 2.0, "hello."), (2.0, 5.0, "now cut the bread.")]);
        let got =
            generate_triplets(&v, &GenerationPorts::stubs(), &GenerationConfig::default()).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].answer, "the bread");
    }

    #[test]
    fn errors_carry_context() {
        let v = video(&[(0.0, 2.0, "a b c")]);
        let ports = GenerationPorts {
            punctuator: &StubPunctuator,
            extractor: &Bad(vec!["q".into()]),
            generator: &StubQuestionGenerator,
        };
        match generate_triplets(&v, &ports, &GenerationConfig::default()) {
            Err(Error::Contract(m)) => assert!(m.contains("video `v` sentence 0"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clip_clamps() {
        let cfg = GenerationConfig {
            min_clip_duration_s: Some(5.0),
            max_clip_duration_s: Some(8.0),
            ..Default::default()
        };
        assert_eq!(clamp_clip(0.0, 20.0, (0.0, 30.0), &cfg), (0.0, 8.0));
        assert_eq!(clamp_clip(10.0, 11.0, (0.0, 30.0), &cfg), (10.0, 15.0));
        assert_eq!(clamp_clip(27.0, 29.0, (0.0, 30.0), &cfg), (25.0, 30.0));
    }
}
