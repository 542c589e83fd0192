use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde_json::{json, Value};
use vqa_core::corpus::{load_transcripts, read_shard_dir};
use vqa_core::encode::{read_feature_file, FeatureDir, TokenizerPort, WhitespaceTokenizer};
use vqa_core::evaluate::{read_downstream, AnswerVocabulary, GroundTruth};
use vqa_core::model::checkpoint::{Checkpoint, CheckpointMeta};
use vqa_core::train::{
    self as core_train, MetricsRecord, NarrationClip, NdjsonLog, Phase, TrainConfig, TrainObserver,
    TrainOutcome,
};
use vqa_core::{Matrix32, VqaT32};

use crate::config::{load_profile, model_config, section, train_config, NarrationConfig};
use crate::manifest::ManifestBuilder;
use crate::vocab::{resolve, VocabSpec};
use crate::{input_err, CommonTrainArgs};

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Directory of triplet shards.
    #[arg(long)]
    shards: PathBuf,
    #[command(flatten)]
    common: CommonTrainArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    /// `top_k:N`, `min_count:N` or a vocabulary file.
    #[arg(long)]
    vocab: Option<VocabSpec>,
    #[command(flatten)]
    common: CommonTrainArgs,
}

#[derive(Args, Debug)]
pub struct MatchingArgs {
    /// Narrated transcripts; aggregated into clips per the profile's narration section.
    #[arg(long)]
    transcripts: PathBuf,
    #[command(flatten)]
    common: CommonTrainArgs,
}

/// Model with its tokenizer and feature source.
struct Setup {
    model: VqaT32,
    tokenizer: WhitespaceTokenizer,
    store: FeatureDir<f32>,
}

fn feature_dim(store: &FeatureDir<f32>, video_id: &str) -> Result<usize> {
    let path = store.path_for(video_id);
    let m: Matrix32 =
        read_feature_file(&path).map_err(|e| input_err!("features of {video_id}: {e}"))?;
    Ok(m.cols())
}

fn setup<'a>(
    a: &CommonTrainArgs,
    profile: &Value,
    cfg: &TrainConfig,
    texts: impl IntoIterator<Item = &'a str>,
    first_video: &str,
) -> Result<Setup> {
    if !a.features.is_dir() {
        return Err(input_err!(
            "features directory {} does not exist",
            a.features.display()
        ));
    }
    let store = FeatureDir::new(&a.features);
    let d_v = feature_dim(&store, first_video)?;
    let (model, tokenizer) = match &a.init {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let (mut model, report) = VqaT32::from_checkpoint(&ckpt, a.allow_partial)?;
            if ckpt.meta.model.d_v != d_v {
                return Err(input_err!(
                    "checkpoint expects {}-dim features, found {d_v}",
                    ckpt.meta.model.d_v
                ));
            }
            model.set_qa_t(a.qa_t || ckpt.meta.model.qa_t);
            eprintln!(
                "init {}: {} loaded, {} transferred, {} missing, {} ignored",
                path.display(),
                report.loaded.len(),
                report.transferred.len(),
                report.missing.len(),
                report.ignored.len()
            );
            (
                model,
                WhitespaceTokenizer::from_words(ckpt.meta.vocabulary.clone()),
            )
        }
        None => {
            let tok = WhitespaceTokenizer::from_texts(texts);
            let mc = model_config(profile, tok.vocab_size(), d_v, a.qa_t, cfg.seed)?;
            (VqaT32::new(mc)?, tok)
        }
    };
    Ok(Setup {
        model,
        tokenizer,
        store,
    })
}

/// Writes the metrics log and one checkpoint per epoch.
struct Recorder {
    log: NdjsonLog<BufWriter<File>>,
    out: PathBuf,
    meta: CheckpointMeta,
    keep: fn(&str) -> bool,
    step: u64,
}

impl Recorder {
    fn new(out: &Path, meta: CheckpointMeta, keep: fn(&str) -> bool) -> Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let f = File::create(out.join("metrics.ndjson")).context("creating metrics log")?;
        Ok(Self {
            log: NdjsonLog {
                out: BufWriter::new(f),
            },
            out: out.to_path_buf(),
            meta,
            keep,
            step: 0,
        })
    }

    fn save(
        &self,
        model: &VqaT32,
        name: &str,
        epoch: Option<usize>,
        val: Option<f64>,
    ) -> vqa_core::Result<PathBuf> {
        let meta = CheckpointMeta {
            step: self.step,
            epoch,
            val_metric: val,
            ..self.meta.clone()
        };
        let path = self.out.join(name);
        model.to_checkpoint_filtered(meta, self.keep).save(&path)?;
        Ok(path)
    }
}

impl TrainObserver<f32> for Recorder {
    fn on_step(&mut self, record: &MetricsRecord) -> vqa_core::Result<()> {
        self.step = record.step as u64;
        TrainObserver::<f32>::on_step(&mut self.log, record)
    }

    fn on_epoch(&mut self, epoch: usize, model: &VqaT32, val: Option<f64>) -> vqa_core::Result<()> {
        self.log
            .out
            .flush()
            .map_err(|e| vqa_core::Error::io("metrics log", e))?;
        self.save(model, &format!("epoch-{epoch}.ckpt"), Some(epoch), val)
            .map(|_| ())
    }
}

fn base_meta(s: &Setup, cfg: &TrainConfig) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        model: s.model.config().clone(),
        vocabulary: s.tokenizer.words().to_vec(),
        phase: cfg.phase.as_str().to_string(),
        step: 0,
        epoch: None,
        val_metric: None,
        train_config: serde_json::to_value(cfg)?,
        answer_vocabulary: None,
    })
}

fn summary(outcome: &TrainOutcome) {
    let last = outcome.losses.last().map(|l| l.total).unwrap_or(f64::NAN);
    println!("{} steps, final loss {last:.6}", outcome.steps);
}

fn inputs(common: &CommonTrainArgs, data: &[&Path]) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = data.iter().map(|p| p.to_path_buf()).collect();
    v.extend(common.config.clone());
    v.extend(common.init.clone());
    v
}

fn resolved(cfg: &TrainConfig, model: &VqaT32) -> Value {
    json!({ "train": cfg, "model": model.config() })
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let m = ManifestBuilder::start("train pretrain");
    let profile = load_profile(a.common.config.as_deref())?;
    let cfg = train_config(&profile, Phase::Pretrain, &a.common)?;
    if !a.shards.is_dir() {
        return Err(input_err!(
            "shard directory {} does not exist",
            a.shards.display()
        ));
    }
    let triplets = read_shard_dir(&a.shards)?;
    let first = triplets
        .first()
        .ok_or_else(|| input_err!("no triplets in {}", a.shards.display()))?;
    let texts = triplets
        .iter()
        .flat_map(|t| [t.question.as_str(), t.answer.as_str()]);
    let mut s = setup(&a.common, &profile, &cfg, texts, &first.video_id.clone())?;
    let mut rec = Recorder::new(&a.common.out, base_meta(&s, &cfg)?, |_| true)?;
    let outcome = core_train::pretrain(
        &mut s.model,
        &triplets,
        &s.store,
        &s.tokenizer,
        &cfg,
        &mut rec,
    )?;
    let fin = rec.save(&s.model, "final.ckpt", None, None)?;
    summary(&outcome);
    let ins = inputs(&a.common, &[&a.shards, &a.common.features]);
    m.finish(
        &a.common.out.join("manifest.json"),
        resolved(&cfg, &s.model),
        &ins,
        &[fin, a.common.out.join("metrics.ndjson")],
        Some(cfg.seed),
    )
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let m = ManifestBuilder::start("train finetune");
    let profile = load_profile(a.common.config.as_deref())?;
    let cfg = train_config(&profile, Phase::Finetune, &a.common)?;
    let train = read_downstream(&a.train)?;
    let val = match &a.val {
        Some(p) => read_downstream(p)?,
        None => Vec::new(),
    };
    let first = train
        .first()
        .ok_or_else(|| input_err!("no samples in {}", a.train.display()))?;
    let needs_vocab = train
        .iter()
        .chain(&val)
        .any(|s| !s.ground_truth.is_multiple_choice());
    let vocab: Option<AnswerVocabulary> = match (&a.vocab, needs_vocab) {
        (Some(spec), _) => Some(resolve(spec, Some(&train))?),
        (None, false) => None,
        (None, true) => return Err(input_err!("open-ended samples need --vocab")),
    };
    let mut texts: Vec<&str> = Vec::new();
    for smp in &train {
        texts.push(&smp.question);
        match &smp.ground_truth {
            GroundTruth::Open(x) => texts.push(x),
            GroundTruth::Ivqa(xs) => texts.extend(xs.iter().map(String::as_str)),
            GroundTruth::MultipleChoice { candidates, .. } => {
                texts.extend(candidates.iter().map(String::as_str))
            }
        }
    }
    if let Some(v) = &vocab {
        texts.extend(v.answers().iter().map(String::as_str));
    }
    let mut s = setup(&a.common, &profile, &cfg, texts, &first.video_id.clone())?;
    let mut meta = base_meta(&s, &cfg)?;
    meta.answer_vocabulary = vocab.as_ref().map(|v| v.answers().to_vec());
    let mut rec = Recorder::new(&a.common.out, meta, |_| true)?;
    let outcome = core_train::finetune(
        &mut s.model,
        &train,
        &val,
        vocab.as_ref(),
        &s.store,
        &s.tokenizer,
        &cfg,
        &mut rec,
    )?;
    let best_val = outcome
        .best_epoch
        .and_then(|e| outcome.val_top1.get(e - 1).copied());
    let best = rec.save(&s.model, "best.ckpt", outcome.best_epoch, best_val)?;
    let mut outputs = vec![best, a.common.out.join("metrics.ndjson")];
    if let Some(v) = &vocab {
        let p = a.common.out.join("vocab.json");
        std::fs::write(&p, serde_json::to_string_pretty(v)? + "\n")
            .context("writing vocab.json")?;
        outputs.push(p);
    }
    summary(&outcome);
    if let (Some(e), Some(v)) = (outcome.best_epoch, best_val) {
        println!("best epoch {e}, val top-1 {v:.4}");
    }
    let mut data: Vec<&Path> = vec![&a.train, &a.common.features];
    data.extend(a.val.as_deref());
    let ins = inputs(&a.common, &data);
    m.finish(
        &a.common.out.join("manifest.json"),
        resolved(&cfg, &s.model),
        &ins,
        &outputs,
        Some(cfg.seed),
    )
}

fn not_answer_encoder(name: &str) -> bool {
    !name.starts_with("g.")
}

pub fn matching(a: MatchingArgs) -> Result<()> {
    let m = ManifestBuilder::start("train matching-pretrain");
    let profile = load_profile(a.common.config.as_deref())?;
    let cfg = train_config(&profile, Phase::MatchingPretrain, &a.common)?;
    let narration: NarrationConfig = section(&profile, "narration")?;
    if !a.transcripts.is_file() {
        return Err(input_err!(
            "transcripts file {} does not exist",
            a.transcripts.display()
        ));
    }
    let videos = load_transcripts(&a.transcripts)?;
    let clips: Vec<NarrationClip> =
        core_train::narration_clips(&videos, narration.min_duration_s, narration.min_words);
    let first = clips
        .first()
        .ok_or_else(|| input_err!("no narration clips in {}", a.transcripts.display()))?;
    let mut s = setup(
        &a.common,
        &profile,
        &cfg,
        clips.iter().map(|c| c.text.as_str()),
        &first.video_id.clone(),
    )?;
    let mut rec = Recorder::new(&a.common.out, base_meta(&s, &cfg)?, not_answer_encoder)?;
    let outcome = core_train::matching_pretrain(
        &mut s.model,
        &clips,
        &s.store,
        &s.tokenizer,
        &cfg,
        &mut rec,
    )?;
    let fin = rec.save(&s.model, "final.ckpt", None, None)?;
    summary(&outcome);
    let ins = inputs(&a.common, &[&a.transcripts, &a.common.features]);
    let config = json!({ "train": cfg, "model": s.model.config(), "narration": narration });
    m.finish(
        &a.common.out.join("manifest.json"),
        config,
        &ins,
        &[fin, a.common.out.join("metrics.ndjson")],
        Some(cfg.seed),
    )
}
