use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use vqa_core::corpus::{read_shard_dir, VqaTriplet};

use crate::input_err;

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    shards: PathBuf,
    /// Write the summary here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Lower edges of the clip-duration histogram, in seconds; the last bin is open.
pub const DURATION_EDGES: [f64; 7] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DurationBin {
    pub lo: f64,
    pub hi: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShardStats {
    pub triplets: usize,
    pub unique_answers: usize,
    pub answers_more_than_once: usize,
    pub answers_more_than_ten: usize,
    pub mean_question_words: f64,
    pub mean_answer_words: f64,
    pub duration_histogram: Vec<DurationBin>,
}

pub fn summarize(triplets: &[VqaTriplet]) -> ShardStats {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in triplets {
        *counts.entry(t.answer.trim()).or_default() += 1;
    }
    let mut hist: Vec<DurationBin> = DURATION_EDGES
        .iter()
        .enumerate()
        .map(|(i, &lo)| DurationBin {
            lo,
            hi: DURATION_EDGES.get(i + 1).copied(),
            count: 0,
        })
        .collect();
    for t in triplets {
        let d = t.end_s - t.start_s;
        let bin = DURATION_EDGES.iter().rposition(|&lo| d >= lo).unwrap_or(0);
        hist[bin].count += 1;
    }
    let mean = |f: &dyn Fn(&VqaTriplet) -> usize| {
        if triplets.is_empty() {
            0.0
        } else {
            triplets.iter().map(f).sum::<usize>() as f64 / triplets.len() as f64
        }
    };
    ShardStats {
        triplets: triplets.len(),
        unique_answers: counts.len(),
        answers_more_than_once: counts.values().filter(|&&c| c > 1).count(),
        answers_more_than_ten: counts.values().filter(|&&c| c > 10).count(),
        mean_question_words: mean(&|t| t.question.split_whitespace().count()),
        mean_answer_words: mean(&|t| t.answer.split_whitespace().count()),
        duration_histogram: hist,
    }
}

pub fn run(a: StatsArgs) -> Result<()> {
    if !a.shards.is_dir() {
        return Err(input_err!(
            "shard directory {} does not exist",
            a.shards.display()
        ));
    }
    let triplets = read_shard_dir(&a.shards)?;
    let text = serde_json::to_string_pretty(&summarize(&triplets))? + "\n";
    match a.out {
        Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
