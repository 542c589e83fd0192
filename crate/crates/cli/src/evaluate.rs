use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde_json::json;
use vqa_core::encode::{FeatureDir, WhitespaceTokenizer};
use vqa_core::evaluate::{
    answer_counts, evaluate_samples, read_downstream, AnswerVocabulary, EvalOptions,
};
use vqa_core::model::checkpoint::Checkpoint;
use vqa_core::VqaT32;

use crate::input_err;
use crate::manifest::{sidecar, ManifestBuilder};
use crate::vocab::{resolve, training_answers, VocabSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    /// Rank a downstream vocabulary with a pretrained model.
    ZeroShot,
    /// Use the vocabulary stored in a finetuned checkpoint.
    Finetuned,
    /// Pick among each sample's own candidates.
    Mc,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// `top_k:N`, `min_count:N` or a vocabulary file.
    #[arg(long)]
    vocab: Option<VocabSpec>,
    /// Training split: answer counts for the vocabulary rules and the frequency quartiles.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "zero-shot")]
    mode: EvalMode,
    #[arg(long)]
    report: PathBuf,
    /// Per-sample predictions as JSON lines.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Score multiple-choice candidates with the matching head.
    #[arg(long)]
    matching_head: bool,
    #[arg(long)]
    allow_partial: bool,
}

pub fn run(a: EvaluateArgs) -> Result<()> {
    let m = ManifestBuilder::start("evaluate");
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (model, report) = VqaT32::from_checkpoint(&ckpt, a.allow_partial)?;
    if !report.missing.is_empty() {
        eprintln!(
            "warning: {} parameters missing from the checkpoint kept their initial values",
            report.missing.len()
        );
    }
    let tok = WhitespaceTokenizer::from_words(ckpt.meta.vocabulary.clone());
    let samples = read_downstream(&a.dataset)?;
    let train = a.train.as_deref().map(read_downstream).transpose()?;
    if !a.features.is_dir() {
        return Err(input_err!(
            "features directory {} does not exist",
            a.features.display()
        ));
    }
    let store = FeatureDir::<f32>::new(&a.features);

    let stored = ckpt.meta.answer_vocabulary.clone();
    let given = a
        .vocab
        .as_ref()
        .map(|spec| resolve(spec, train.as_deref()))
        .transpose()?;
    let vocab: Option<AnswerVocabulary> = match a.mode {
        EvalMode::Mc => {
            if let Some(s) = samples
                .iter()
                .find(|s| !s.ground_truth.is_multiple_choice())
            {
                return Err(input_err!("mc mode: sample {} has no candidates", s.id));
            }
            None
        }
        EvalMode::Finetuned => {
            let stored = stored.ok_or_else(|| {
                input_err!(
                    "checkpoint {} carries no answer vocabulary",
                    a.checkpoint.display()
                )
            })?;
            let stored = AnswerVocabulary::from_list(stored)?;
            if let Some(g) = &given {
                if g.answers() != stored.answers() {
                    return Err(input_err!(
                        "--vocab does not match the vocabulary the checkpoint was finetuned with"
                    ));
                }
            }
            Some(stored)
        }
        EvalMode::ZeroShot => {
            let v = given.ok_or_else(|| input_err!("zero-shot mode needs --vocab"))?;
            if let Some(s) = &stored {
                if s.as_slice() != v.answers() {
                    return Err(input_err!(
                        "--vocab does not match the vocabulary stored in the checkpoint"
                    ));
                }
            }
            Some(v)
        }
    };
    let opts = EvalOptions {
        train_counts: train.as_deref().map(|t| answer_counts(training_answers(t))),
        use_matching_head: a.matching_head,
    };
    let (rep, preds) = evaluate_samples(&model, &samples, vocab.as_ref(), &store, &tok, &opts)?;
    std::fs::write(&a.report, serde_json::to_string_pretty(&rep)? + "\n")
        .with_context(|| format!("writing {}", a.report.display()))?;
    let mut outputs = vec![a.report.clone()];
    if let Some(p) = &a.predictions {
        let mut text = String::new();
        for pr in &preds {
            text += &serde_json::to_string(pr)?;
            text.push('\n');
        }
        std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
        outputs.push(p.clone());
    }
    println!("top-1 {:.4} over {} samples", rep.top1, rep.n_samples);
    let mut inputs = vec![a.checkpoint.clone(), a.dataset.clone(), a.features.clone()];
    inputs.extend(a.train.clone());
    let config = json!({
        "mode": format!("{:?}", a.mode),
        "vocab": a.vocab.as_ref().map(|v| format!("{v:?}")),
        "matching_head": a.matching_head,
        "allow_partial": a.allow_partial,
    });
    m.finish(&sidecar(&a.report), config, &inputs, &outputs, None)
}
