//! Timestamped narration transcripts and generated-triplet shards.
//!
//! Transcripts are newline-delimited JSON, one video per line:
//! `{"video_id": str, "segments": [{"start": float, "end": float, "text": str}, ...]}`.
//! Shards hold one [`VqaTriplet`] per line in the same encoding.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One ASR segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSegment {
    #[serde(rename = "start")]
    pub start_s: f64,
    #[serde(rename = "end")]
    pub end_s: f64,
    pub text: String,
}

impl TranscriptSegment {
    pub fn new(start_s: f64, end_s: f64, text: impl Into<String>) -> Self {
        Self {
            start_s,
            end_s,
            text: text.into(),
        }
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.text.split_whitespace()
    }

    pub fn word_count(&self) -> usize {
        self.words().count()
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarratedVideo {
    pub video_id: String,
    pub segments: Vec<TranscriptSegment>,
}

impl NarratedVideo {
    pub fn new(video_id: impl Into<String>, segments: Vec<TranscriptSegment>) -> Self {
        Self {
            video_id: video_id.into(),
            segments,
        }
    }

    /// Checks timing and text invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Err(Error::validation(&self.video_id, message));
        if self.video_id.is_empty() {
            return Err(Error::validation("video_id", "empty video id"));
        }
        let mut previous_start = f64::NEG_INFINITY;
        for (i, seg) in self.segments.iter().enumerate() {
            if !seg.start_s.is_finite() || !seg.end_s.is_finite() || seg.start_s < 0.0 {
                return fail(format!("segment {i} has invalid timestamps"));
            }
            if seg.start_s > seg.end_s {
                return fail(format!("segment {i} ends before it starts"));
            }
            if seg.start_s < previous_start {
                return fail(format!("segment {i} starts before segment {}", i - 1));
            }
            if seg.text.chars().any(char::is_control) {
                return fail(format!("segment {i} text contains control characters"));
            }
            previous_start = seg.start_s;
        }
        Ok(())
    }

    /// `[first start, last end]`, or `None` without segments.
    pub fn time_bounds(&self) -> Option<(f64, f64)> {
        let first = self.segments.first()?;
        let end = self
            .segments
            .iter()
            .map(|s| s.end_s)
            .fold(first.end_s, f64::max);
        Some((first.start_s, end))
    }
}

/// The unit of generated training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaTriplet {
    pub video_id: String,
    #[serde(rename = "start")]
    pub start_s: f64,
    #[serde(rename = "end")]
    pub end_s: f64,
    pub question: String,
    pub answer: String,
}

impl VqaTriplet {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: &str| Err(Error::validation(&self.video_id, message));
        if !(self.start_s.is_finite() && self.end_s.is_finite() && self.start_s < self.end_s) {
            return fail("triplet clip must satisfy start < end");
        }
        if self.question.trim().is_empty() {
            return fail("empty question");
        }
        if self.answer.split_whitespace().next().is_none() {
            return fail("empty answer");
        }
        Ok(())
    }
}

/// A written shard file.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletShard {
    pub path: PathBuf,
    pub count: usize,
}

/// Parses newline-delimited transcript records. Blank lines are skipped.
pub fn parse_transcripts(source: impl Read) -> Result<Vec<NarratedVideo>> {
    let mut videos = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(source).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let video: NarratedVideo = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        video.validate()?;
        if !seen.insert(video.video_id.clone()) {
            return Err(Error::validation(&video.video_id, "duplicate video id"));
        }
        videos.push(video);
    }
    Ok(videos)
}

pub fn load_transcripts(path: &Path) -> Result<Vec<NarratedVideo>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_transcripts(file)
}

pub fn write_transcripts(videos: &[NarratedVideo], mut sink: impl Write) -> Result<()> {
    for video in videos {
        serde_json::to_writer(&mut sink, video)?;
        sink.write_all(b"\n")
            .map_err(|e| Error::io("<transcripts>", e))?;
    }
    Ok(())
}

/// Length of the longest word sequence that is a suffix of `left` and a prefix of `right`,
/// compared case-insensitively.
fn overlap_len(left: &[String], right: &[String]) -> usize {
    let max = left.len().min(right.len());
    (1..=max)
        .rev()
        .find(|&k| {
            left[left.len() - k..]
                .iter()
                .zip(&right[..k])
                .all(|(a, b)| a == b)
        })
        .unwrap_or(0)
}

fn lowered_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Removes narration repeated across adjacent segments.
///
/// Walking left to right, the longest suffix of segment `i` that reappears as a
/// prefix of segment `i + 1` is cut from the front of `i + 1`; the cut repeats
/// until no overlap is left, which keeps the transformation idempotent.
pub fn dedup_adjacent_repetitions(video: &NarratedVideo) -> NarratedVideo {
    let mut out = video.clone();
    for i in 1..out.segments.len() {
        let left = lowered_words(&out.segments[i - 1].text);
        let original: Vec<&str> = out.segments[i].text.split_whitespace().collect();
        let mut lowered = lowered_words(&out.segments[i].text);
        let mut removed = 0;
        loop {
            let k = overlap_len(&left, &lowered);
            if k == 0 {
                break;
            }
            lowered.drain(..k);
            removed += k;
        }
        if removed > 0 {
            out.segments[i].text = original[removed..].join(" ");
        }
    }
    out
}

/// Merges consecutive segments until each aggregate lasts at least `min_duration_s`
/// seconds and holds at least `min_words` words.
///
/// A trailing remainder below either threshold is folded into the previous aggregate,
/// or kept alone when it is the only one.
pub fn aggregate_segments(
    video: &NarratedVideo,
    min_duration_s: f64,
    min_words: usize,
) -> NarratedVideo {
    struct Pending {
        start: f64,
        end: f64,
        words: Vec<String>,
    }
    impl Pending {
        fn into_segment(self) -> TranscriptSegment {
            TranscriptSegment::new(self.start, self.end, self.words.join(" "))
        }
    }

    let mut done: Vec<Pending> = Vec::new();
    let mut current: Option<Pending> = None;
    for seg in &video.segments {
        let pending = current.get_or_insert_with(|| Pending {
            start: seg.start_s,
            end: seg.end_s,
            words: Vec::new(),
        });
        pending.end = pending.end.max(seg.end_s);
        pending.words.extend(seg.words().map(str::to_owned));
        if pending.end - pending.start >= min_duration_s && pending.words.len() >= min_words {
            done.extend(current.take());
        }
    }
    if let Some(rest) = current {
        match done.last_mut() {
            Some(last) => {
                last.end = last.end.max(rest.end);
                last.words.extend(rest.words);
            }
            None => done.push(rest),
        }
    }
    NarratedVideo {
        video_id: video.video_id.clone(),
        segments: done.into_iter().map(Pending::into_segment).collect(),
    }
}

/// Writes `triplets` as one JSON record per line.
pub fn write_shard(path: &Path, triplets: &[VqaTriplet]) -> Result<TripletShard> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for t in triplets {
        t.validate()?;
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(TripletShard {
        path: path.to_path_buf(),
        count: triplets.len(),
    })
}

pub fn parse_shard(source: impl Read) -> Result<Vec<VqaTriplet>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(source).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let t: VqaTriplet = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        t.validate().map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(t);
    }
    Ok(out)
}

pub fn read_shard(path: &Path) -> Result<Vec<VqaTriplet>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_shard(file).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// `*.jsonl` files of a shard directory, sorted by file name.
pub fn shard_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|ext| ext == "jsonl") {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Reads every shard of a directory in file-name order.
pub fn read_shard_dir(dir: &Path) -> Result<Vec<VqaTriplet>> {
    let mut all = Vec::new();
    for path in shard_paths(dir)? {
        all.extend(read_shard(&path)?);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn video(segments: &[(f64, f64, &str)]) -> NarratedVideo {
        NarratedVideo::new(
            "v1",
            segments
                .iter()
                .map(|&(s, e, t)| TranscriptSegment::new(s, e, t))
                .collect(),
        )
    }

    fn texts(v: &NarratedVideo) -> Vec<&str> {
        v.segments.iter().map(|s| s.text.as_str()).collect()
    }

    /// Tries every overlap length and keeps the largest matching one.
    fn brute_force_overlap(left: &str, right: &str) -> usize {
        let l: Vec<String> = lowered_words(left);
        let r: Vec<String> = lowered_words(right);
        let mut best = 0;
        for k in 0..=l.len().min(r.len()) {
            if l[l.len() - k..] == r[..k] {
                best = k;
            }
        }
        best
    }

    #[test]
    fn parses_single_record() {
        let src = r#"{"video_id":"v1","segments":[{"start":0.0,"end":3.2,"text":"hello world"}]}"#;
        let videos = parse_transcripts(src.as_bytes()).unwrap();
        assert_eq!(videos, vec![video(&[(0.0, 3.2, "hello world")])]);
    }

    #[test]
    fn parses_empty_segment_list() {
        let videos = parse_transcripts(r#"{"video_id":"v2","segments":[]}"#.as_bytes()).unwrap();
        assert_eq!(videos[0].video_id, "v2");
        assert!(videos[0].segments.is_empty());
    }

    #[test]
    fn rejects_out_of_order_segments() {
        let src = r#"{"video_id":"v1","segments":[{"start":5.0,"end":6.0,"text":"a"},{"start":2.0,"end":3.0,"text":"b"}]}"#;
        match parse_transcripts(src.as_bytes()) {
            Err(Error::Validation { subject, .. }) => assert_eq!(subject, "v1"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let src = "{\"video_id\":\"a\",\"segments\":[]}\n{\"video_id\":";
        match parse_transcripts(src.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_control_characters_and_duplicates() {
        let bad = r#"{"video_id":"v","segments":[{"start":0,"end":1,"text":"a\u0007b"}]}"#;
        assert!(matches!(
            parse_transcripts(bad.as_bytes()),
            Err(Error::Validation { .. })
        ));
        let dup = "{\"video_id\":\"v\",\"segments\":[]}\n{\"video_id\":\"v\",\"segments\":[]}\n";
        assert!(matches!(
            parse_transcripts(dup.as_bytes()),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn dedup_examples() {
        let v = video(&[(0.0, 2.0, "fold them in half"), (2.0, 4.0, "in half again")]);
        assert_eq!(brute_force_overlap("fold them in half", "in half again"), 2);
        assert_eq!(
            texts(&dedup_adjacent_repetitions(&v)),
            ["fold them in half", "again"]
        );

        let v = video(&[(0.0, 2.0, "add sugar"), (2.0, 4.0, "then mix")]);
        assert_eq!(dedup_adjacent_repetitions(&v), v);

        let v = video(&[(0.0, 2.0, "mix it"), (2.0, 4.0, "mix it")]);
        let out = dedup_adjacent_repetitions(&v);
        assert_eq!(texts(&out), ["mix it", ""]);
        assert_eq!(out.segments[1].start_s, 2.0);
    }

    #[test]
    fn dedup_is_case_insensitive_and_keeps_casing() {
        let v = video(&[(0.0, 1.0, "Cut The Onion"), (1.0, 2.0, "the onion Finely")]);
        assert_eq!(
            texts(&dedup_adjacent_repetitions(&v)),
            ["Cut The Onion", "Finely"]
        );
    }

    #[test]
    fn aggregate_examples() {
        let v = video(&[
            (0.0, 4.0, "w w w w w"),
            (4.0, 7.0, "w w w w"),
            (7.0, 12.0, "w w w w w w"),
        ]);
        let out = aggregate_segments(&v, 10.0, 10);
        assert_eq!(out.segments.len(), 1);
        assert_eq!(
            (out.segments[0].start_s, out.segments[0].end_s),
            (0.0, 12.0)
        );
        assert_eq!(out.segments[0].word_count(), 15);

        let single = video(&[(0.0, 12.0, "a b c d e f g h i j k l")]);
        assert_eq!(aggregate_segments(&single, 10.0, 10), single);

        let v = video(&[(0.0, 11.0, "a b c d e f g h i j k"), (11.0, 13.0, "x y z")]);
        let out = aggregate_segments(&v, 10.0, 10);
        assert_eq!(out.segments.len(), 1);
        assert_eq!(
            (out.segments[0].start_s, out.segments[0].end_s),
            (0.0, 13.0)
        );
        assert_eq!(out.segments[0].word_count(), 14);
    }

    #[test]
    fn aggregate_skips_empty_text_in_join() {
        let v = video(&[(0.0, 5.0, "a"), (5.0, 6.0, ""), (6.0, 12.0, "b")]);
        let out = aggregate_segments(&v, 10.0, 2);
        assert_eq!(texts(&out), ["a b"]);
    }

    #[test]
    fn shard_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let triplets: Vec<VqaTriplet> = (0..3)
            .map(|i| VqaTriplet {
                video_id: format!("v{i}"),
                start_s: i as f64,
                end_s: i as f64 + 1.5,
                question: format!("what is {i}?"),
                answer: "a thing".into(),
            })
            .collect();
        let shard = write_shard(&path, &triplets).unwrap();
        assert_eq!(shard.count, 3);
        assert_eq!(read_shard(&path).unwrap(), triplets);

        let empty = dir.path().join("empty.jsonl");
        assert_eq!(write_shard(&empty, &[]).unwrap().count, 0);
        assert!(read_shard(&empty).unwrap().is_empty());

        let text = std::fs::read_to_string(&path).unwrap();
        let cut = text.len() - 20;
        std::fs::write(&path, &text[..cut]).unwrap();
        match read_shard(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn arb_video() -> impl Strategy<Value = NarratedVideo> {
        let word = prop::sample::select(vec!["a", "b", "C", "mix", "it", "Then"]);
        let seg = (0.0f64..5.0, prop::collection::vec(word, 0..6));
        prop::collection::vec(seg, 0..8).prop_map(|raw| {
            let mut t = 0.0;
            let segments = raw
                .into_iter()
                .map(|(dur, words)| {
                    let s = TranscriptSegment::new(t, t + dur, words.join(" "));
                    t += dur;
                    s
                })
                .collect();
            NarratedVideo::new("p", segments)
        })
    }

    proptest! {
        #[test]
        fn dedup_idempotent(v in arb_video()) {
            let once = dedup_adjacent_repetitions(&v);
            prop_assert_eq!(dedup_adjacent_repetitions(&once), once.clone());
            for (a, b) in once.segments.iter().zip(&v.segments) {
                prop_assert_eq!((a.start_s, a.end_s), (b.start_s, b.end_s));
            }
        }

        #[test]
        fn dedup_leaves_no_adjacent_overlap(v in arb_video()) {
            let out = dedup_adjacent_repetitions(&v);
            for pair in out.segments.windows(2) {
                prop_assert_eq!(brute_force_overlap(&pair[0].text, &pair[1].text), 0);
            }
        }

        #[test]
        fn aggregate_preserves_words_and_extent(v in arb_video(), min_d in 0.5f64..12.0, min_w in 1usize..8) {
            let out = aggregate_segments(&v, min_d, min_w);
            let before: Vec<&str> = v.segments.iter().flat_map(|s| s.words()).collect();
            let after: Vec<&str> = out.segments.iter().flat_map(|s| s.words()).collect();
            prop_assert_eq!(before, after);
            prop_assert_eq!(out.time_bounds(), v.time_bounds());
            if out.segments.len() > 1 {
                for s in &out.segments {
                    prop_assert!(s.duration() >= min_d && s.word_count() >= min_w);
                }
            }
        }

        #[test]
        fn transcripts_roundtrip(v in arb_video()) {
            let mut buf = Vec::new();
            write_transcripts(std::slice::from_ref(&v), &mut buf).unwrap();
            let parsed = parse_transcripts(buf.as_slice()).unwrap();
            prop_assert_eq!(parsed, vec![v]);
        }
    }
}
